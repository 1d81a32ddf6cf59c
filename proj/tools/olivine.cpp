#include "olivine/cli.hpp"

int main(int argc, char** argv) { return olivine::cli::dispatch(argc, argv); }
