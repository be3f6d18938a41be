fn main() {
    std::process::exit(geoloss::cli::main_entry());
}
