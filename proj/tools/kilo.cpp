#include <string>
#include <vector>

#include "kilo/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return kilo::run_command(args);
}
