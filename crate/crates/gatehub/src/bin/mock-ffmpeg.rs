fn main() {
    std::process::exit(gatehub::stub::run(gatehub::stub::Tool::Ffmpeg, std::env::args_os()));
}
