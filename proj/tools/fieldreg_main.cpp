#include <string>
#include <vector>

#include "fieldreg/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return fieldreg::cli::run(args);
}
