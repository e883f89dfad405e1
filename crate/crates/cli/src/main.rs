fn main() {
    eprintln!("pixelwalk: command line interface not assembled yet");
    std::process::exit(1);
}
