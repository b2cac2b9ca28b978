fn main() {
    let rt = lockbox_cli::cli::Runtime::system();
    let code = lockbox_cli::cli::run(
        std::env::args_os(),
        &rt,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
