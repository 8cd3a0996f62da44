fn main() {
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if std::env::var_os("RUST_LOG").is_none() {
        // eval prints its warnings itself
        logger.filter_module("retifuse::metrics", log::LevelFilter::Error);
    }
    logger.init();
    std::process::exit(retifuse_cli::run(std::env::args_os()));
}
