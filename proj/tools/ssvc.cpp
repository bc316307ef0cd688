#include <string>
#include <vector>

#include "ssvc/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ssvc::pipeline::run_command(args);
}
