#pragma once

#include <iosfwd>

namespace qx {

// Exit codes: 0 ok, 1 user error (bad flags, bad inputs), 2 internal error.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qx
