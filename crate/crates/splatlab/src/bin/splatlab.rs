fn main() {
    std::process::exit(splatlab::cli::main_entry());
}
