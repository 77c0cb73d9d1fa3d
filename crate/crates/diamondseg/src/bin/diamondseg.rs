fn main() {
    std::process::exit(diamondseg::cli::run());
}
