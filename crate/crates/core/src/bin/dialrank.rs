fn main() {
    let mut stdout = std::io::stdout().lock();
    if let Err(f) = dialrank::cli::run(std::env::args_os(), &mut stdout) {
        eprintln!("{}", f.message.trim_end());
        std::process::exit(f.code);
    }
}
