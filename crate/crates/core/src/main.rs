fn main() {
    std::process::exit(beamacq::cli::run(std::env::args_os()));
}
