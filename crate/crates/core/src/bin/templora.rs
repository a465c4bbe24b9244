fn main() {
    // CLI wiring lands after the engine modules.
    eprintln!("not yet implemented");
    std::process::exit(1);
}
