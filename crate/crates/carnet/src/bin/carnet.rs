fn main() {
    std::process::exit(carnet::cli::dispatch(std::env::args_os()));
}
