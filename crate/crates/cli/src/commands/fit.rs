//! Fits the configured model to one dataset and writes the parameter
//! files, the log-likelihood trace, and the fit summary.

use crate::config::Config;
use crate::error::Result;
use crate::model_io::{load_model, save_model, write_trace, TRACE_FILE};
use crate::modelspec::{fit_sample, parse_model_spec, MODEL_DIM_KEYS, MODEL_KEYS};
use multiway::io::load_long_table;

const EXTRA_KEYS: [&str; 2] = ["data", "init"];

pub fn run(cfg: &Config) -> Result<()> {
    let fixed: Vec<&str> = MODEL_KEYS.iter().chain(EXTRA_KEYS.iter()).copied().collect();
    cfg.check_keys("fit", &fixed, &MODEL_DIM_KEYS)?;

    let spec = parse_model_spec(cfg)?;
    let data = cfg.require_path("data")?;
    let table = load_long_table(&data, &spec.schema())?;
    let warm = match cfg.get_path("init") {
        Some(dir) => Some(load_model(&dir)?),
        None => None,
    };
    let out = cfg.out_dir()?;

    let outcome = fit_sample(&table.sample, &spec, warm.as_ref())?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }

    save_model(&out, &outcome.model, &spec.dims, &table.levels, &outcome.extras)?;
    write_trace(&out.join(TRACE_FILE), &outcome.trace)?;
    cfg.write_resolved(&out.join("resolved.cfg"))?;
    println!(
        "fit {} after {} sweep(s); parameters in {}",
        if outcome.converged {
            "converged"
        } else {
            "stopped at the iteration budget"
        },
        outcome.iterations,
        out.display()
    );
    Ok(())
}
