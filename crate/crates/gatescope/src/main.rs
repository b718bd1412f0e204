fn main() {
    std::process::exit(gatescope::cli::main_with_args(std::env::args_os()));
}
