fn main() {
    std::process::exit(mscdt::cli::dispatch(std::env::args_os()));
}
