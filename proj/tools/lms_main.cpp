#include <iostream>
#include <string>
#include <vector>

#include "lms/cli.hpp"

int main(int argc, char** argv) {
  return lms::run_command(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
