fn main() {
    std::process::exit(grassmann_scatter_cli::main_with_args(std::env::args_os()));
}
