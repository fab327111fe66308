//! Text format for [`LayerProfiles`].
//!
//! ```text
//! # anything after '#' is a comment
//! format = pipelearn-profile/1
//! name = vgg5-like
//! time_unit = s        # s | ms | us
//! volume_unit = Mb     # Mb | kb | b | MB (megabytes)
//! layers = 2
//! #     q  device_fwd device_bwd server_fwd server_bwd fwd_volume bwd_volume params
//! layer 1  0.5        1.0        0.01       0.02       52.4       52.4       896
//! layer 2  0.1        0.2        0.001      0.002      0.08       0.08       1290
//! ```
//!
//! Values are converted to seconds and megabits on read. [`write_profile`]
//! always emits `s` and `Mb` with shortest round-trip float formatting, so
//! write followed by parse is lossless.

use super::{CostError, LayerCost, LayerProfiles};

pub const PROFILE_FORMAT: &str = "pipelearn-profile/1";

fn err(line: usize, message: impl Into<String>) -> CostError {
    CostError::Parse {
        line,
        message: message.into(),
    }
}

fn time_scale(unit: &str) -> Option<f64> {
    match unit {
        "s" => Some(1.0),
        "ms" => Some(1e-3),
        "us" => Some(1e-6),
        _ => None,
    }
}

fn volume_scale(unit: &str) -> Option<f64> {
    match unit {
        "Mb" => Some(1.0),
        "kb" => Some(1e-3),
        "b" => Some(1e-6),
        "MB" => Some(8.0),
        _ => None,
    }
}

pub fn parse_profile(text: &str) -> Result<LayerProfiles, CostError> {
    let mut format = None;
    let mut name = None;
    let mut time_unit = None;
    let mut volume_unit = None;
    let mut declared: Option<(usize, usize)> = None;
    let mut rows: Vec<(usize, [f64; 6], u64)> = Vec::new();
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("layer ").or_else(|| line.strip_prefix("layer\t")) {
            if format.is_none() {
                return Err(err(line_no, "layer row before format header"));
            }
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(err(
                    line_no,
                    format!("layer row needs 8 fields, found {}", fields.len()),
                ));
            }
            let q: usize = fields[0]
                .parse()
                .map_err(|_| err(line_no, format!("bad layer index {:?}", fields[0])))?;
            if q != rows.len() + 1 {
                return Err(err(
                    line_no,
                    format!("layer index {q} out of order, expected {}", rows.len() + 1),
                ));
            }
            let mut vals = [0.0; 6];
            for (v, f) in vals.iter_mut().zip(&fields[1..7]) {
                *v = f
                    .parse::<f64>()
                    .map_err(|_| err(line_no, format!("bad number {f:?}")))?;
                if !v.is_finite() || *v < 0.0 {
                    return Err(err(line_no, format!("value {f} must be finite and >= 0")));
                }
            }
            let params: u64 = fields[7]
                .parse()
                .map_err(|_| err(line_no, format!("bad parameter count {:?}", fields[7])))?;
            rows.push((line_no, vals, params));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `key = value`, found {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let slot = match key {
            "format" => {
                if value != PROFILE_FORMAT {
                    return Err(err(line_no, format!("unsupported format {value:?}")));
                }
                &mut format
            }
            "name" => &mut name,
            "time_unit" => {
                if time_scale(value).is_none() {
                    return Err(err(line_no, format!("unknown time unit {value:?}")));
                }
                &mut time_unit
            }
            "volume_unit" => {
                if volume_scale(value).is_none() {
                    return Err(err(line_no, format!("unknown volume unit {value:?}")));
                }
                &mut volume_unit
            }
            "layers" => {
                if declared.is_some() {
                    return Err(err(line_no, "duplicate key `layers`"));
                }
                let n: usize = value
                    .parse()
                    .map_err(|_| err(line_no, format!("bad layer count {value:?}")))?;
                declared = Some((n, line_no));
                continue;
            }
            other => return Err(err(line_no, format!("unknown key {other:?}"))),
        };
        if slot.is_some() {
            return Err(err(line_no, format!("duplicate key `{key}`")));
        }
        *slot = Some(value.to_string());
    }

    if format.is_none() {
        return Err(err(last_line.max(1), "missing `format` header"));
    }
    let (count, count_line) = declared.ok_or_else(|| err(last_line.max(1), "missing `layers`"))?;
    if count != rows.len() {
        return Err(err(
            count_line,
            format!("declared {count} layers, found {}", rows.len()),
        ));
    }
    let ts = time_scale(time_unit.as_deref().unwrap_or("s")).expect("validated");
    let vs = volume_scale(volume_unit.as_deref().unwrap_or("Mb")).expect("validated");
    let layers = rows
        .into_iter()
        .map(|(_, v, params)| LayerCost {
            device_forward: v[0] * ts,
            device_backward: v[1] * ts,
            server_forward: v[2] * ts,
            server_backward: v[3] * ts,
            forward_volume_mb: v[4] * vs,
            backward_volume_mb: v[5] * vs,
            params,
        })
        .collect();
    LayerProfiles::new(name.unwrap_or_else(|| "unnamed".into()), layers)
        .map_err(|e| err(count_line, e.to_string()))
}

pub fn write_profile(profiles: &LayerProfiles) -> String {
    let mut out = String::new();
    out.push_str(&format!("format = {PROFILE_FORMAT}\n"));
    let name: String = profiles
        .name()
        .chars()
        .map(|c| if c == '#' || c.is_control() { '_' } else { c })
        .collect();
    if !name.trim().is_empty() {
        out.push_str(&format!("name = {}\n", name.trim()));
    }
    out.push_str("time_unit = s\nvolume_unit = Mb\n");
    out.push_str(&format!("layers = {}\n", profiles.len()));
    out.push_str("#     q device_fwd device_bwd server_fwd server_bwd fwd_volume bwd_volume params\n");
    for (q, l) in profiles.layers().iter().enumerate() {
        out.push_str(&format!(
            "layer {} {:?} {:?} {:?} {:?} {:?} {:?} {}\n",
            q + 1,
            l.device_forward,
            l.device_backward,
            l.server_forward,
            l.server_backward,
            l.forward_volume_mb,
            l.backward_volume_mb,
            l.params
        ));
    }
    out
}
