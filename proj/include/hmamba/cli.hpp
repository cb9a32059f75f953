#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace hmamba {

// Exit codes: 0 success, 1 validation/usage error, 2 runtime or numeric error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
            std::ostream& err = std::cerr);

}  // namespace hmamba
