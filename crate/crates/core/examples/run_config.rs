//! Runs an experiment from inline TOML, the same path the CLI takes.

use timechange_bsde::{parse_config, run_experiment};

const CONFIG: &str = r#"
kind = "solve-bsde"
seed = 1
out = "target/example-out"

[grid]
horizon = 0.5
steps = 20

[batch]
scenarios = 2000

[driver]
name = "sine"
a = 0.5
b = 0.2

[terminal]
name = "brownian"
a = 1.0
"#;

fn main() {
    let cfg = match parse_config(CONFIG) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    match run_experiment(&cfg) {
        Ok(out) => {
            for line in out.summary_lines() {
                println!("{line}");
            }
            println!("artifacts: {} and {}", out.csv.display(), out.jsonl.display());
        }
        Err(e) => eprintln!("{e}"),
    }
}
