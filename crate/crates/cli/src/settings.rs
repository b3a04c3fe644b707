use std::path::Path;

use anyhow::{Context, Result};
use markprompt::config::RunConfig;
use markprompt::scoring::PromptTemplate;
use markprompt::tasks::MeanSubtract;
use markprompt::{Color, MarkerSpec, PointF};

use crate::{usage, RunArgs};

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Built-in defaults, then the config file, then flags.
pub fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    if !args.backends.is_empty() {
        c.backends = args.backends.clone();
    }
    if let Some(m) = &args.marker {
        c.marker = parse_marker(m)?;
    }
    if let Some(t) = args.tau {
        c.tau = t;
    }
    if let Some(g) = args.grid {
        c.grid = g;
    }
    if let Some(a) = args.alpha {
        c.alpha = a;
    }
    if let Some(q) = args.distractors {
        c.distractors = q;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(o) = &args.output_dir {
        c.output_dir = Some(o.clone());
    }
    if let Some(t) = &args.template {
        c.template = PromptTemplate::new(t.clone()).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(d) = &args.decode {
        c.decode = d
            .parse()
            .map_err(|e: markprompt::Error| usage(e.to_string()))?;
    }
    if args.no_mean_subtract {
        c.mean_subtract = MeanSubtract::None;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

pub fn parse_marker(json: &str) -> Result<MarkerSpec> {
    serde_json::from_str(json).map_err(|e| usage(format!("bad --marker: {e}")))
}

fn parse_numbers(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            usage(format!(
                "{what} must be {n} comma-separated numbers, got {s:?}"
            ))
        })?;
    if values.len() != n || values.iter().any(|v| !v.is_finite()) {
        return Err(usage(format!(
            "{what} must be {n} comma-separated numbers, got {s:?}"
        )));
    }
    Ok(values)
}

pub fn parse_point(s: &str) -> Result<PointF> {
    let v = parse_numbers(s, 2, "--at")?;
    Ok(PointF::new(v[0], v[1]))
}

pub fn parse_bbox(s: &str) -> Result<markprompt::BBox> {
    let v = parse_numbers(s, 4, "--bbox")?;
    markprompt::BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| usage(e.to_string()))
}

pub fn parse_color(s: &str) -> Result<Color> {
    if let Some(hex) = s.strip_prefix('#') {
        if hex.len() == 6 {
            let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16);
            if let (Ok(r), Ok(g), Ok(b)) = (byte(0), byte(2), byte(4)) {
                return Ok(Color::new(r, g, b));
            }
        }
    }
    Color::from_name(s).ok_or_else(|| usage(format!("unknown color {s:?}")))
}

pub fn split_list(s: &str) -> Vec<&str> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect()
}

pub fn output_dir(c: &RunConfig) -> Result<std::path::PathBuf> {
    let dir = std::path::PathBuf::from(c.output_dir.as_deref().unwrap_or("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
