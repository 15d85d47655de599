//! Drives the command line end to end in a temporary directory: generate
//! data, train both heads, then evaluate the joint head with its history
//! cut to the last k rows. The joint head is trained without round
//! dropout so that it leans on the history rows it is later denied.

use dialrank::cli::run;

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join(format!("dialrank-ablation-{}", std::process::id()));
    let p = |rel: &str| dir.join(rel).to_string_lossy().into_owned();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("run.toml"),
        "seed = 1\n[train]\nepochs = 30\nselect_best = false\n\
         [train.schedule]\nbase = 0.003\ndecrement = 0.0\nlinear_until = 25\ndecay = 0.7\n",
    )?;
    let mut out = std::io::stdout();
    let mut call = |args: &[&str]| -> anyhow::Result<()> {
        let argv = std::iter::once("dialrank").chain(args.iter().copied());
        run(argv, &mut out).map_err(|f| anyhow::anyhow!("exit {}: {}", f.code, f.message))
    };
    call(&["gen", "--config", &p("run.toml"), "--out", &p("data")])?;
    call(&["train", "--config", &p("run.toml"), "--data", &p("data"), "--model", "joint", "--out", &p("joint"), "--round-dropout", "off"])?;
    call(&["train", "--config", &p("run.toml"), "--data", &p("data"), "--model", "image_only", "--out", &p("image")])?;
    call(&[
        "ablate-history",
        "--data",
        &p("data"),
        "--k",
        "0,1,2,full",
        "--joint",
        &p("joint/checkpoint.txt"),
        "--image",
        &p("image/checkpoint.txt"),
    ])?;
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
