fn main() {
    let seed = std::env::var(dssi_cli::SEED_ENV).ok();
    std::process::exit(dssi_cli::main_with_args(std::env::args_os(), seed.as_deref()));
}
