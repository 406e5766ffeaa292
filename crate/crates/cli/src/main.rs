fn main() {
    std::process::exit(kdeq_cli::run(std::env::args_os()));
}
