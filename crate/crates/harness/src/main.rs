fn main() {
    std::process::exit(hrpvt_harness::cli::main_entry());
}
