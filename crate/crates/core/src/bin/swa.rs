fn main() {
    let code = swa_core::cli::run(std::env::args_os());
    std::process::exit(code);
}
