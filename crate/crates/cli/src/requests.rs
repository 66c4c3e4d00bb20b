//! Edit-request and edit-list files.
//!
//! A request file is a JSON array of records:
//!
//! ```json
//! [{"concept": "red-square", "subject": "red-square",
//!   "source_prompts": ["a photo of red-square"],
//!   "destination": {"prompts": ["a photo of blue-ring"]},
//!   "layers": [0, 1]}]
//! ```
//!
//! `destination` may instead be `{"images": ["ring.json"]}`, naming files
//! that each hold a flat JSON array of image values; relative names resolve
//! against the request file. `layers` defaults to the configured plan.

use std::path::Path;

use emcid::diffusion::ToyImage;
use emcid::stage1::{Destination, EditRequest};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum DestinationRecord {
    Prompts(Vec<String>),
    Images(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestRecord {
    concept: String,
    subject: Option<String>,
    source_prompts: Vec<String>,
    destination: DestinationRecord,
    layers: Option<Vec<usize>>,
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn load_image(path: &Path) -> CliResult<ToyImage> {
    let values: Vec<f64> = parse_json(path, &read(path)?)?;
    Ok(ToyImage::new(values)?)
}

pub fn load_requests(path: &Path, default_layers: &[usize]) -> CliResult<Vec<EditRequest>> {
    let records: Vec<RequestRecord> = parse_json(path, &read(path)?)?;
    let base = path.parent().unwrap_or(Path::new(""));
    records
        .into_iter()
        .map(|r| {
            let destination = match r.destination {
                DestinationRecord::Prompts(p) => Destination::Prompts(p),
                DestinationRecord::Images(files) => {
                    Destination::Images(files.iter().map(|f| load_image(&base.join(f))).collect::<CliResult<_>>()?)
                }
            };
            let req = EditRequest {
                subject: r.subject.unwrap_or_else(|| r.concept.clone()),
                concept: r.concept,
                source_prompts: r.source_prompts,
                destination,
                layers: r.layers.unwrap_or_else(|| default_layers.to_vec()),
            };
            req.validate()?;
            Ok(req)
        })
        .collect()
}

/// `[["source", "destination"], ...]`.
pub fn load_edits(path: &Path) -> CliResult<Vec<(String, String)>> {
    parse_json(path, &read(path)?)
}
