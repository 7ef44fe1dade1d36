fn main() {
    std::process::exit(truth_neurons::cli::run());
}
