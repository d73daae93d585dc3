#include <string>
#include <vector>

#include "anomseg/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return anomseg::cli::run(args);
}
