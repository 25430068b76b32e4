fn main() {
    eprintln!("msmsim: command-line interface not wired up yet");
    std::process::exit(3);
}
