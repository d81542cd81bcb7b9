fn main() {
    std::process::exit(ticontrol::cli::main_with_args(std::env::args_os()));
}
