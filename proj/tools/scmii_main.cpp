#include <iostream>
#include <string>
#include <vector>

#include "scmii/cli.hpp"

int main(int argc, char** argv) {
  scmii::configure_logging_from_env();
  const std::vector<std::string> args(argv + 1, argv + argc);
  return scmii::dispatch(args, std::cout, std::cerr);
}
