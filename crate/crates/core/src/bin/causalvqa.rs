fn main() {
    std::process::exit(causalvqa::harness::cli_main(std::env::args_os()));
}
