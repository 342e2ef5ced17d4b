//! G-code parsing into layer-segmented keypoints and emission of printer-ready
//! single-layer programs.
//!
//! The parser is a small RepRap-style state machine. It tracks positioning
//! mode (G90/G91), extrusion mode (M82/M83) and extruder resets (G92), and
//! reports every XY move as a [`Keypoint`] carrying the *physical* cumulative
//! extrusion at arrival, so that `G92 E0` resets are invisible downstream.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of decimals used for every coordinate written by [`emit_layer`].
pub const COORD_DECIMALS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum GcodeError {
    #[error("line {line}: malformed number in word `{word}`")]
    MalformedNumber { line: usize, word: String },
    #[error("line {line}: Z decreased from {from} to {to} (non-planar input is not supported)")]
    NegativeLayerHeight { line: usize, from: f64, to: f64 },
    #[error("line {line}: arc command `{command}` is not supported")]
    UnsupportedArc { line: usize, command: String },
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`")]
    BadValue { line: usize, key: String },
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Absolute,
    Relative,
}

/// Interpreter state after a prefix of a program.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub position_mode: Mode,
    pub extrusion_mode: Mode,
    /// Physical position (x, y, z) in mm.
    pub current: [f64; 3],
    /// Physical filament advanced since program start, unaffected by G92.
    pub e_cumulative: f64,
    /// Difference between physical and logical extruder position.
    pub e_offset: f64,
    /// Difference between physical and logical XYZ position (G92 X/Y/Z).
    pub xyz_offset: [f64; 3],
}

impl Default for MachineState {
    fn default() -> Self {
        Self {
            position_mode: Mode::Absolute,
            extrusion_mode: Mode::Absolute,
            current: [0.0; 3],
            e_cumulative: 0.0,
            e_offset: 0.0,
            xyz_offset: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Cumulative absolute extrusion at arrival, in mm of filament.
    pub e: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, e: f64) -> Self {
        Self { x, y, e }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.e.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerToolpath {
    pub z: f64,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrinterProfile {
    pub build_min: (f64, f64),
    pub build_max: (f64, f64),
    /// mm/min
    pub feedrate: f64,
    pub extrusion_multiplier: f64,
    pub nozzle_temp: f64,
    pub bed_temp: f64,
}

impl Default for PrinterProfile {
    fn default() -> Self {
        Self {
            build_min: (0.0, 0.0),
            build_max: (220.0, 220.0),
            feedrate: 1200.0,
            extrusion_multiplier: 1.0,
            nozzle_temp: 210.0,
            bed_temp: 60.0,
        }
    }
}

impl PrinterProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let finite = [
            self.build_min.0,
            self.build_min.1,
            self.build_max.0,
            self.build_max.1,
            self.feedrate,
            self.extrusion_multiplier,
            self.nozzle_temp,
            self.bed_temp,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(ProfileError::Invalid("non-finite value".into()));
        }
        if !(self.build_min.0 < self.build_max.0 && self.build_min.1 < self.build_max.1) {
            return Err(ProfileError::Invalid("build_min must be below build_max".into()));
        }
        if self.feedrate <= 0.0 {
            return Err(ProfileError::Invalid("feedrate must be positive".into()));
        }
        if self.extrusion_multiplier <= 0.0 {
            return Err(ProfileError::Invalid("extrusion_multiplier must be positive".into()));
        }
        Ok(())
    }

    /// Reads a profile from `key = value` lines. Missing keys keep their
    /// defaults; `#` and `;` start comments.
    pub fn parse_config(text: &str) -> Result<Self, ProfileError> {
        let mut p = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ProfileError::Syntax { line: line_no })?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            let v: f64 = value.parse().map_err(|_| ProfileError::BadValue {
                line: line_no,
                key: key.to_string(),
            })?;
            match key {
                "build_min_x" => p.build_min.0 = v,
                "build_min_y" => p.build_min.1 = v,
                "build_max_x" => p.build_max.0 = v,
                "build_max_y" => p.build_max.1 = v,
                "feedrate" => p.feedrate = v,
                "extrusion_multiplier" => p.extrusion_multiplier = v,
                "nozzle_temp" => p.nozzle_temp = v,
                "bed_temp" => p.bed_temp = v,
                _ => {
                    return Err(ProfileError::UnknownKey {
                        line: line_no,
                        key: key.to_string(),
                    })
                }
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ProfileError> {
        Self::parse_config(&std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> String {
        format!(
            "build_min_x = {}\nbuild_min_y = {}\nbuild_max_x = {}\nbuild_max_y = {}\n\
             feedrate = {}\nextrusion_multiplier = {}\nnozzle_temp = {}\nbed_temp = {}\n",
            self.build_min.0,
            self.build_min.1,
            self.build_max.0,
            self.build_max.1,
            self.feedrate,
            self.extrusion_multiplier,
            self.nozzle_temp,
            self.bed_temp
        )
    }
}

/// Removes `;` line comments and `( ... )` inline comments.
fn strip_comments(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut depth = 0usize;
    for ch in line.chars() {
        match ch {
            ';' if depth == 0 => break,
            '(' => depth += 1,
            ')' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(ch),
            _ => {}
        }
    }
    out
}

/// Splits a command line into (letter, number-text) words. Handles both
/// space-separated (`G1 X10 Y2`) and packed (`G1X10Y2`) forms.
fn split_words(line: &str) -> Vec<(char, String)> {
    let mut words: Vec<(char, String)> = Vec::new();
    for ch in line.chars() {
        if ch.is_whitespace() {
            continue;
        }
        if ch == '*' {
            // checksum suffix
            break;
        }
        if ch.is_ascii_alphabetic() {
            words.push((ch.to_ascii_uppercase(), String::new()));
        } else if let Some(last) = words.last_mut() {
            last.1.push(ch);
        } else {
            words.push(('?', ch.to_string()));
        }
    }
    words
}

fn parse_num(letter: char, text: &str, line: usize) -> Result<f64, GcodeError> {
    let v = f64::from_str(text).map_err(|_| GcodeError::MalformedNumber {
        line,
        word: format!("{letter}{text}"),
    })?;
    if !v.is_finite() {
        return Err(GcodeError::MalformedNumber {
            line,
            word: format!("{letter}{text}"),
        });
    }
    Ok(v)
}

#[derive(Default)]
struct Axes {
    x: Option<f64>,
    y: Option<f64>,
    z: Option<f64>,
    e: Option<f64>,
}

fn parse_axes(words: &[(char, String)], line: usize) -> Result<Axes, GcodeError> {
    let mut axes = Axes::default();
    for (letter, text) in words {
        match letter {
            'X' => axes.x = Some(parse_num(*letter, text, line)?),
            'Y' => axes.y = Some(parse_num(*letter, text, line)?),
            'Z' => axes.z = Some(parse_num(*letter, text, line)?),
            'E' => axes.e = Some(parse_num(*letter, text, line)?),
            'F' => {
                parse_num(*letter, text, line)?;
            }
            _ => {}
        }
    }
    Ok(axes)
}

/// Incremental G-code interpreter. [`parse_program`] drives it over a whole
/// text; it is exposed so callers can inspect intermediate state.
#[derive(Debug, Default)]
pub struct Interpreter {
    pub state: MachineState,
    layers: Vec<LayerToolpath>,
    open: Option<LayerToolpath>,
}

impl Interpreter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed_line(&mut self, raw: &str, line_no: usize) -> Result<(), GcodeError> {
        let cleaned = strip_comments(raw);
        let words = split_words(&cleaned);
        // Skip a leading line number.
        let words: &[(char, String)] = match words.first() {
            Some(('N', _)) => &words[1..],
            _ => &words[..],
        };
        let Some((letter, code)) = words.first() else {
            return Ok(());
        };
        let args = &words[1..];
        let code_num = code.trim();
        match (letter, code_num) {
            ('G', "0" | "00" | "1" | "01") => {
                let axes = parse_axes(args, line_no)?;
                self.motion(axes, line_no)?;
            }
            ('G', "2" | "02" | "3" | "03") => {
                return Err(GcodeError::UnsupportedArc {
                    line: line_no,
                    command: format!("G{code_num}"),
                });
            }
            // G90/G91 switch the extruder too; M82/M83 override E afterwards.
            ('G', "90") => {
                self.state.position_mode = Mode::Absolute;
                self.state.extrusion_mode = Mode::Absolute;
            }
            ('G', "91") => {
                self.state.position_mode = Mode::Relative;
                self.state.extrusion_mode = Mode::Relative;
            }
            ('G', "92") => {
                let axes = parse_axes(args, line_no)?;
                self.set_position(axes);
            }
            ('G', "28") => {
                let axes = parse_axes(args, line_no)?;
                let all = axes.x.is_none() && axes.y.is_none() && axes.z.is_none();
                if all || axes.x.is_some() {
                    self.state.current[0] = 0.0;
                    self.state.xyz_offset[0] = 0.0;
                }
                if all || axes.y.is_some() {
                    self.state.current[1] = 0.0;
                    self.state.xyz_offset[1] = 0.0;
                }
                if all || axes.z.is_some() {
                    self.state.current[2] = 0.0;
                    self.state.xyz_offset[2] = 0.0;
                }
            }
            ('M', "82") => self.state.extrusion_mode = Mode::Absolute,
            ('M', "83") => self.state.extrusion_mode = Mode::Relative,
            // M104/M140/M84/T.. and anything else carry no geometry.
            _ => {}
        }
        Ok(())
    }

    fn set_position(&mut self, axes: Axes) {
        let none = axes.x.is_none() && axes.y.is_none() && axes.z.is_none() && axes.e.is_none();
        let s = &mut self.state;
        if none {
            s.e_offset = s.e_cumulative;
            for i in 0..3 {
                s.xyz_offset[i] = s.current[i];
            }
            return;
        }
        if let Some(e) = axes.e {
            // logical E becomes `e`; physical total is unchanged
            s.e_offset = s.e_cumulative - e;
        }
        for (i, v) in [axes.x, axes.y, axes.z].into_iter().enumerate() {
            if let Some(v) = v {
                s.xyz_offset[i] = s.current[i] - v;
            }
        }
    }

    fn motion(&mut self, axes: Axes, line_no: usize) -> Result<(), GcodeError> {
        let s = &mut self.state;
        let target = |cur: f64, off: f64, v: Option<f64>, mode: Mode| match (v, mode) {
            (None, _) => cur,
            (Some(v), Mode::Absolute) => v + off,
            (Some(v), Mode::Relative) => cur + v,
        };
        let nx = target(s.current[0], s.xyz_offset[0], axes.x, s.position_mode);
        let ny = target(s.current[1], s.xyz_offset[1], axes.y, s.position_mode);
        let nz = target(s.current[2], s.xyz_offset[2], axes.z, s.position_mode);
        let ne = target(s.e_cumulative, s.e_offset, axes.e, s.extrusion_mode);

        if axes.z.is_some() && nz != s.current[2] {
            if nz < s.current[2] {
                return Err(GcodeError::NegativeLayerHeight {
                    line: line_no,
                    from: s.current[2],
                    to: nz,
                });
            }
            if let Some(layer) = self.open.take() {
                if !layer.keypoints.is_empty() {
                    self.layers.push(layer);
                }
            }
        }
        s.current = [nx, ny, nz];
        s.e_cumulative = ne;
        if axes.x.is_some() || axes.y.is_some() {
            let layer = self.open.get_or_insert_with(|| LayerToolpath {
                z: nz,
                keypoints: Vec::new(),
            });
            layer.keypoints.push(Keypoint::new(nx, ny, ne));
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<LayerToolpath> {
        if let Some(layer) = self.open.take() {
            if !layer.keypoints.is_empty() {
                self.layers.push(layer);
            }
        }
        self.layers
    }
}

/// Parses a whole program into layers. Layers are delimited by Z changes on
/// motion commands; layers without XY motion are dropped.
pub fn parse_program(text: &str) -> Result<Vec<LayerToolpath>, GcodeError> {
    let mut interp = Interpreter::new();
    for (idx, line) in text.lines().enumerate() {
        interp.feed_line(line, idx + 1)?;
    }
    Ok(interp.finish())
}

fn fmt_coord(v: f64) -> String {
    format!("{:.*}", COORD_DECIMALS, v)
}

/// Writes a complete single-layer program: header, one `G1` per keypoint,
/// footer.
pub fn emit_layer(keypoints: &[Keypoint], profile: &PrinterProfile, z: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "; single-layer toolpath, {} keypoints", keypoints.len());
    out.push_str("G90\nM82\n");
    let _ = writeln!(out, "M104 S{}", profile.nozzle_temp);
    let _ = writeln!(out, "M140 S{}", profile.bed_temp);
    let _ = writeln!(out, "M109 S{}", profile.nozzle_temp);
    let _ = writeln!(out, "M190 S{}", profile.bed_temp);
    out.push_str("G28\nG92 E0\n");
    let _ = writeln!(out, "G0 Z{} F{}", fmt_coord(z), profile.feedrate);
    for k in keypoints {
        let _ = writeln!(
            out,
            "G1 X{} Y{} E{} F{}",
            fmt_coord(k.x),
            fmt_coord(k.y),
            fmt_coord(k.e),
            profile.feedrate
        );
    }
    let last_e = keypoints.last().map(|k| k.e).unwrap_or(0.0);
    out.push_str("; end of layer\n");
    let _ = writeln!(out, "G1 E{} F2400", fmt_coord(last_e - 1.0));
    out.push_str("M104 S0\nM140 S0\nM84\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    OutOfBounds { index: usize, x: f64, y: f64 },
    NonMonotonicExtrusion { index: usize, previous: f64, current: f64 },
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_layer(keypoints: &[Keypoint], profile: &PrinterProfile) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, k) in keypoints.iter().enumerate() {
        if !k.is_finite() {
            violations.push(Violation::NonFinite { index: i });
            continue;
        }
        if k.x < profile.build_min.0
            || k.x > profile.build_max.0
            || k.y < profile.build_min.1
            || k.y > profile.build_max.1
        {
            violations.push(Violation::OutOfBounds { index: i, x: k.x, y: k.y });
        }
        if i > 0 && k.e < keypoints[i - 1].e {
            violations.push(Violation::NonMonotonicExtrusion {
                index: i,
                previous: keypoints[i - 1].e,
                current: k.e,
            });
        }
    }
    ValidationReport { violations }
}

/// Sum of XY segment lengths between consecutive keypoints.
pub fn travel_length(keypoints: &[Keypoint]) -> f64 {
    keypoints
        .windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64, e: f64) -> Keypoint {
        Keypoint::new(x, y, e)
    }

    #[test]
    fn absolute_mode_is_identity() {
        let layers = parse_program("G90\nM82\nG1 X10 Y0 E0.5 F1200").unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].keypoints, vec![kp(10.0, 0.0, 0.5)]);
    }

    #[test]
    fn relative_mode_accumulates() {
        let layers = parse_program("G91\nG1 X5 E0.1\nG1 X5 E0.1").unwrap();
        let k = &layers[0].keypoints;
        assert_eq!(k.len(), 2);
        assert!((k[0].x - 5.0).abs() < 1e-12 && (k[0].e - 0.1).abs() < 1e-12);
        assert!((k[1].x - 10.0).abs() < 1e-12 && (k[1].e - 0.2).abs() < 1e-12);
        assert_eq!(k[1].y, 0.0);
    }

    #[test]
    fn g92_keeps_cumulative_extrusion_continuous() {
        let layers = parse_program("G90\nM82\nG1 X1 Y1 E2.0\nG92 E0\nG1 X2 Y1 E0.5").unwrap();
        let es: Vec<f64> = layers[0].keypoints.iter().map(|k| k.e).collect();
        assert_eq!(es, vec![2.0, 2.5]);
    }

    #[test]
    fn comments_are_stripped() {
        let layers = parse_program("G1 X1 (move; here) Y2 ; trailing X99\n; G1 X50").unwrap();
        assert_eq!(layers[0].keypoints, vec![kp(1.0, 2.0, 0.0)]);
    }

    #[test]
    fn z_change_opens_new_layer() {
        let text = "G1 Z0.2\nG1 X1 Y1 E1\nG1 X2 Y1 E2\nG1 Z0.4\nG1 X3 Y3 E3\n";
        let layers = parse_program(text).unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].z, 0.2);
        assert_eq!(layers[0].keypoints.len(), 2);
        assert_eq!(layers[1].z, 0.4);
        assert_eq!(layers[1].keypoints, vec![kp(3.0, 3.0, 3.0)]);
    }

    #[test]
    fn z_decrease_is_rejected() {
        let err = parse_program("G1 Z0.4\nG1 X1 Y1\nG1 Z0.2 X2").unwrap_err();
        assert!(matches!(err, GcodeError::NegativeLayerHeight { line: 3, .. }));
    }

    #[test]
    fn malformed_number_is_reported() {
        let err = parse_program("G1 X1.2.3 Y0").unwrap_err();
        assert_eq!(
            err,
            GcodeError::MalformedNumber {
                line: 1,
                word: "X1.2.3".into()
            }
        );
    }

    #[test]
    fn arcs_are_rejected() {
        assert!(matches!(
            parse_program("G2 X1 Y1 I1 J0"),
            Err(GcodeError::UnsupportedArc { .. })
        ));
    }

    #[test]
    fn unknown_commands_are_skipped() {
        let layers = parse_program("M117 Hello world!\nT0\nM106 S255\nG1 X1 Y1 E1").unwrap();
        assert_eq!(layers[0].keypoints.len(), 1);
    }

    #[test]
    fn g0_travel_keeps_extrusion() {
        let layers = parse_program("G1 X1 Y0 E1\nG0 X5 Y5\nG1 X6 Y5 E2").unwrap();
        let es: Vec<f64> = layers[0].keypoints.iter().map(|k| k.e).collect();
        assert_eq!(es, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn emit_formats_five_decimals() {
        let p = PrinterProfile::default();
        let text = emit_layer(&[kp(10.0, 0.0, 0.5)], &p, 0.2);
        assert!(text.lines().any(|l| l == "G1 X10.00000 Y0.00000 E0.50000 F1200"));
        assert!(text.contains("G90\nM82\n"));
    }

    #[test]
    fn emit_empty_has_no_body() {
        let text = emit_layer(&[], &PrinterProfile::default(), 0.2);
        assert_eq!(text.lines().filter(|l| l.starts_with("G1 X")).count(), 0);
        assert!(text.contains("G28"));
        assert!(text.contains("M84"));
        assert!(parse_program(&text).unwrap().is_empty());
    }

    #[test]
    fn validation_entries() {
        let p = PrinterProfile::default();
        let square = [
            kp(10.0, 10.0, 0.0),
            kp(20.0, 10.0, 0.5),
            kp(20.0, 20.0, 1.0),
            kp(10.0, 20.0, 1.5),
            kp(10.0, 10.0, 2.0),
        ];
        assert!(validate_layer(&square, &p).is_valid());

        let oob = [kp(10.0, 10.0, 0.0), kp(-5.0, 10.0, 0.1)];
        assert_eq!(
            validate_layer(&oob, &p).violations,
            vec![Violation::OutOfBounds { index: 1, x: -5.0, y: 10.0 }]
        );

        let nm = [kp(1.0, 1.0, 0.1), kp(2.0, 1.0, 0.3), kp(3.0, 1.0, 0.2)];
        let r = validate_layer(&nm, &p);
        assert_eq!(r.violations.len(), 1);
        assert!(matches!(r.violations[0], Violation::NonMonotonicExtrusion { index: 2, .. }));
    }

    #[test]
    fn travel_length_cases() {
        let sq = [
            kp(0.0, 0.0, 0.0),
            kp(1.0, 0.0, 0.0),
            kp(1.0, 1.0, 0.0),
            kp(0.0, 1.0, 0.0),
            kp(0.0, 0.0, 0.0),
        ];
        assert_eq!(travel_length(&sq), 4.0);
        assert_eq!(travel_length(&sq[..1]), 0.0);

        // serpentine: 5 passes of length 1 joined by 4 connectors of 0.25
        let mut pts = Vec::new();
        for i in 0..5 {
            let y = i as f64 * 0.25;
            let (a, b) = if i % 2 == 0 { (0.0, 1.0) } else { (1.0, 0.0) };
            pts.push(kp(a, y, 0.0));
            pts.push(kp(b, y, 0.0));
        }
        assert!((travel_length(&pts) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn profile_config_round_trip() {
        let p = PrinterProfile {
            build_max: (250.0, 210.0),
            feedrate: 1800.0,
            ..Default::default()
        };
        let q = PrinterProfile::parse_config(&p.to_config()).unwrap();
        assert_eq!(p, q);
        assert!(PrinterProfile::parse_config("feedrate = 0").is_err());
        assert!(PrinterProfile::parse_config("speed = 3").is_err());
        assert!(PrinterProfile::parse_config("# comment only\n").is_ok());
    }
}
