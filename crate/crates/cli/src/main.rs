fn main() {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let code = onesug_cli::run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
