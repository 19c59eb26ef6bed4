fn main() {
    std::process::exit(kdlm_cli::main_with_args(std::env::args_os()));
}
