//! Parsing a run configuration with comments and overrides, and the digest
//! every command prints.

use volumix::config::RunConfig;

fn main() -> volumix::Result<()> {
    let text = "\
# four-variant desk comparison
variant = tshydra
epochs = 20      # short schedule
width = 24
regime = multi_organ
";
    let mut cfg = RunConfig::parse(text)?;
    cfg.set("lr", "5e-4")?;
    cfg.validate()?;
    println!("digest {}", cfg.digest());
    print!("{}", cfg.to_text());
    match RunConfig::parse("epochs = 2\nmomentum = 0.9\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
