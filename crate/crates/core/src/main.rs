fn main() {
    std::process::exit(impulse_games::cli::run(std::env::args_os()));
}
