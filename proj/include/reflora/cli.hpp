#pragma once

#include <iosfwd>

namespace reflora {

inline constexpr const char* kVersion = "0.1.0";

/// Entry point of the `reflora` tool. argv[0] is the program name, argv[1] the subcommand.
/// Returns 0 on success, 2 on a usage error, 1 on a runtime error or a failed property.
int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace reflora
