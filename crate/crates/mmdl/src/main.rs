fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMDL_LOG", "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(mmdl::cli::run(std::env::args_os().collect()));
}
