//! Regenerates the shipped demo fixture: `latte-fixture <dir>`.

fn main() {
    let Some(dir) = std::env::args_os().nth(1) else {
        eprintln!("usage: latte-fixture <output-dir>");
        std::process::exit(2);
    };
    if let Err(e) = latte_cli::fixture::write_demo_fixture(std::path::Path::new(&dir)) {
        eprintln!("latte-fixture: {e}");
        std::process::exit(1);
    }
}
