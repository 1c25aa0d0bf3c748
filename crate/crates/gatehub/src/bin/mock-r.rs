fn main() {
    std::process::exit(gatehub::stub::run(gatehub::stub::Tool::R, std::env::args_os()));
}
