fn main() {
    std::process::exit(f2t2hit_cli::run(std::env::args_os()));
}
