fn main() {
    std::process::exit(shadowbench::harness::run(std::env::args_os()));
}
