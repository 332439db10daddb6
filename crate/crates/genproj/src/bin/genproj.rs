fn main() {
    // CLI wiring lands after the library settles.
    eprintln!("genproj: not yet wired");
    std::process::exit(2);
}
