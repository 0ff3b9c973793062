fn main() {
    std::process::exit(dpcqa_cli::run(std::env::args_os()));
}
