fn main() { std::process::exit(freqphys::cli::run()); }
