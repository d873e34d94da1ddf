fn main() {
    let code = comemo_core::cli::run_command(std::env::args_os());
    std::process::exit(code);
}
