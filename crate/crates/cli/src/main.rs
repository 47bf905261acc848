fn main() {
    std::process::exit(pwtest_cli::dispatch(std::env::args_os()));
}
