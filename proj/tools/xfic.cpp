#include "xfic/cli.hpp"

int main(int argc, char** argv) { return xfic::cli_dispatch(argc, argv); }
