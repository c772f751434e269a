#include <iostream>

#include "reflora/cli.hpp"

int main(int argc, char** argv) {
  return reflora::parse_and_dispatch(argc, argv, std::cout, std::cerr);
}
