fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = cot_cli::init_threads() {
        eprintln!("error: {e}");
        std::process::exit(cot_cli::exit_code(&e));
    }
    std::process::exit(cot_cli::run(std::env::args_os()));
}
