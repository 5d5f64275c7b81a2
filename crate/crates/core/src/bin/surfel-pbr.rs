fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(surfel_pbr::cli::main_with_args(&argv));
}
