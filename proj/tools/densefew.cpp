#include "densefew/cli.hpp"

int main(int argc, char** argv) { return densefew::cli::run(argc, argv); }
