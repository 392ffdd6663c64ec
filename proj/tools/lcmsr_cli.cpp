#include "lcmsr/cli.hpp"

int main(int argc, char** argv) {
  at::set_num_threads(1);
  return lcmsr::cli::run(argc, argv);
}
