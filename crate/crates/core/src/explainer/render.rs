//! File output for explanations: an SVG overlay, PGM heatmaps, and a JSON
//! record.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Explanation, Heatmap, Region};
use crate::data_model::SpectrogramImage;
use crate::error::{shape_err, ApexError, Result};
use crate::schemes::Scheme;

#[derive(Clone, Debug, Default)]
pub struct RenderedFiles {
    pub record: PathBuf,
    pub overlay: Option<PathBuf>,
    pub spectrogram: Option<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
}

fn file_stem(sample_id: &str) -> String {
    sample_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Binary PGM, 8-bit; values in `[0, 1]` are stored as `round(v·255)`.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(shape_err!("pgm expects {} values, got {}", width * height, values.len()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a PGM written by [`write_pgm`], returning `(width, height, values in [0, 1])`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = || ApexError::Format("not an 8-bit binary PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    if fields[0] != "P5" || num(&fields[3])? != 255 || bytes.len() != pos + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect()))
}

fn region_rects(r: &Region, width: usize, height: usize) -> Vec<(usize, usize, usize, usize)> {
    // (x, y, w, h) with x along time and y along frequency
    let full_t = (0, width);
    let full_f = (0, height);
    let rect = |f: (usize, usize), t: (usize, usize)| (t.0, f.0, t.1 - t.0, f.1 - f.0);
    match r.kind {
        Scheme::Square => vec![rect(r.f_range.unwrap_or(full_f), r.t_range.unwrap_or(full_t))],
        Scheme::Time => vec![rect(full_f, r.t_range.unwrap_or(full_t))],
        Scheme::Frequency => vec![rect(r.f_range.unwrap_or(full_f), full_t)],
        Scheme::TimeFrequency => {
            let mut v = Vec::new();
            if let Some(f) = r.f_range {
                v.push(rect(f, full_t));
            }
            if let Some(t) = r.t_range {
                v.push(rect(full_f, t));
            }
            v
        }
    }
}

fn normalized(s: &SpectrogramImage) -> Vec<f64> {
    let lo = s.values.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = s.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = if hi > lo { hi - lo } else { 1.0 };
    s.values.iter().map(|&v| (v as f64 - lo) / span).collect()
}

fn overlay_svg(expl: &Explanation, background: &str) -> String {
    let (w, h) = (expl.input_geometry.time_frames, expl.input_geometry.freq_bins);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"  <image x="0" y="0" width="{w}" height="{h}" preserveAspectRatio="none" xlink:href="{background}"/>"#
    );
    for ch in &expl.channels {
        let _ = writeln!(svg, r#"  <g id="channel-{}" data-contribution="{}">"#, ch.channel, ch.contribution);
        for (x, y, rw, rh) in region_rects(&ch.region, w, h) {
            let _ = writeln!(
                svg,
                r#"    <rect x="{x}" y="{y}" width="{rw}" height="{rh}" fill="none" stroke="lime" stroke-width="1"/>"#
            );
        }
        let _ = writeln!(svg, "  </g>");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<id>.json` always; with a spectrogram also `<id>.svg`,
/// `<id>_spectrogram.pgm`, and one `<id>_ch<k>.pgm` heatmap per channel.
pub fn render_explanation(
    expl: &Explanation,
    spectrogram: Option<&SpectrogramImage>,
    out_dir: impl AsRef<Path>,
) -> Result<RenderedFiles> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let stem = file_stem(&expl.sample_id);
    let mut files = RenderedFiles::default();

    for ch in &expl.channels {
        if let Some(hm) = &ch.heatmap {
            let Heatmap {
                freq_bins,
                time_frames,
                values,
            } = hm;
            let path = out_dir.join(format!("{stem}_ch{}.pgm", ch.channel));
            write_pgm(&path, *time_frames, *freq_bins, values)?;
            files.heatmaps.push(path);
        }
    }

    if let Some(spec) = spectrogram {
        if spec.geometry() != expl.input_geometry {
            return Err(shape_err!(
                "spectrogram is {}x{} but the explanation expects {}x{}",
                spec.freq_bins,
                spec.time_frames,
                expl.input_geometry.freq_bins,
                expl.input_geometry.time_frames
            ));
        }
        let bg_name = format!("{stem}_spectrogram.pgm");
        let bg = out_dir.join(&bg_name);
        write_pgm(&bg, spec.time_frames, spec.freq_bins, &normalized(spec))?;
        let svg = out_dir.join(format!("{stem}.svg"));
        fs::write(&svg, overlay_svg(expl, &bg_name))?;
        files.spectrogram = Some(bg);
        files.overlay = Some(svg);
    }

    let record = out_dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(expl).map_err(|e| ApexError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&record, text)?;
    files.record = record;
    Ok(files)
}
