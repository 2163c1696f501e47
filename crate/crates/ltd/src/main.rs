fn main() {
    println!("ltd: command-line interface not wired up yet");
}
