fn main() {
    let code = tvsr::cli::dispatch(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
