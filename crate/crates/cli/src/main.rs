fn main() {
    std::process::exit(t1q_cli::run(std::env::args_os()));
}
