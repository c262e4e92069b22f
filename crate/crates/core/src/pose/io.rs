//! Plain-text pose files.
//!
//! Format (one document per clip):
//!
//! ```text
//! one2all-pose v1
//! layout stick34
//! keypoints 34
//! resolution 64 64
//! fps 8
//! frames 2
//! frame 0 enhanced 0
//! 32 22 1
//! ... one "x y confidence" row per keypoint ...
//! frame 1 enhanced 1
//! ...
//! ```
//!
//! Numbers are written in shortest round-trip decimal form, so read(write(x))
//! reproduces coordinates exactly.

use std::io::{BufRead, BufReader, Read, Write};

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

use super::frame::{PoseFrame, PoseSequence};
use super::PoseError;

const MAGIC: &str = "one2all-pose v1";

pub fn write_pose_file<S: Scalar, W: Write>(
    w: &mut W,
    seq: &PoseSequence<S>,
    layout_name: &str,
) -> Result<(), PoseError> {
    let k = seq.frames.first().map(|f| f.keypoint_count()).unwrap_or(0);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "layout {layout_name}")?;
    writeln!(w, "keypoints {k}")?;
    writeln!(w, "resolution {} {}", seq.resolution.0, seq.resolution.1)?;
    writeln!(w, "fps {}", seq.fps)?;
    writeln!(w, "frames {}", seq.len())?;
    for (i, f) in seq.frames.iter().enumerate() {
        writeln!(w, "frame {} enhanced {}", i, u8::from(f.enhanced))?;
        for j in 0..k {
            let p = f.point(j);
            writeln!(w, "{} {} {}", p[0], p[1], f.confidence[j])?;
        }
    }
    Ok(())
}

/// Parse a pose file; returns the sequence and the layout name it declares.
pub fn read_pose_file<S: Scalar, R: Read>(
    r: R,
) -> Result<(PoseSequence<S>, String), PoseError> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines().enumerate();

    let mut next = |expect: &str| -> Result<(usize, String), PoseError> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n + 1, l)),
            Some((n, Err(e))) => Err(PoseError::Parse {
                line: n + 1,
                msg: e.to_string(),
            }),
            None => Err(PoseError::Parse {
                line: 0,
                msg: format!("unexpected end of file, wanted {expect}"),
            }),
        }
    };

    let (ln, magic) = next("magic")?;
    if magic.trim() != MAGIC {
        return Err(PoseError::Parse {
            line: ln,
            msg: format!("bad magic '{magic}'"),
        });
    }
    let parse_kv = |line: usize, text: &str, key: &str| -> Result<Vec<String>, PoseError> {
        let mut it = text.split_whitespace();
        if it.next() != Some(key) {
            return Err(PoseError::Parse {
                line,
                msg: format!("expected '{key} ...', got '{text}'"),
            });
        }
        Ok(it.map(str::to_string).collect())
    };
    let parse_num = |line: usize, tok: &str| -> Result<f64, PoseError> {
        tok.parse::<f64>().map_err(|e| PoseError::Parse {
            line,
            msg: format!("bad number '{tok}': {e}"),
        })
    };

    let (ln, l) = next("layout")?;
    let layout_name = parse_kv(ln, &l, "layout")?
        .first()
        .cloned()
        .ok_or(PoseError::Parse {
            line: ln,
            msg: "layout name missing".into(),
        })?;
    let (ln, l) = next("keypoints")?;
    let k = parse_num(ln, &parse_kv(ln, &l, "keypoints")?[0])? as usize;
    let (ln, l) = next("resolution")?;
    let res = parse_kv(ln, &l, "resolution")?;
    let resolution = (
        parse_num(ln, &res[0])? as usize,
        parse_num(ln, &res[1])? as usize,
    );
    let (ln, l) = next("fps")?;
    let fps = parse_num(ln, &parse_kv(ln, &l, "fps")?[0])?;
    let (ln, l) = next("frames")?;
    let n_frames = parse_num(ln, &parse_kv(ln, &l, "frames")?[0])? as usize;

    let mut frames = Vec::with_capacity(n_frames);
    for fi in 0..n_frames {
        let (ln, l) = next("frame header")?;
        let hdr = parse_kv(ln, &l, "frame")?;
        if hdr.len() != 3 || hdr[1] != "enhanced" {
            return Err(PoseError::Parse {
                line: ln,
                msg: format!("bad frame header '{l}'"),
            });
        }
        if parse_num(ln, &hdr[0])? as usize != fi {
            return Err(PoseError::Parse {
                line: ln,
                msg: format!("frame index mismatch, expected {fi}"),
            });
        }
        let enhanced = hdr[2] == "1";
        let mut points = Array2::<S>::zeros((k, 2));
        let mut conf = Array1::<S>::zeros(k);
        for j in 0..k {
            let (ln, l) = next("keypoint row")?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(PoseError::Parse {
                    line: ln,
                    msg: format!("expected 'x y confidence', got '{l}'"),
                });
            }
            points[[j, 0]] = S::from_f64(parse_num(ln, toks[0])?);
            points[[j, 1]] = S::from_f64(parse_num(ln, toks[1])?);
            conf[j] = S::from_f64(parse_num(ln, toks[2])?);
        }
        let mut frame = PoseFrame::new(points, conf);
        frame.enhanced = enhanced;
        frames.push(frame);
    }
    Ok((PoseSequence::new(frames, fps, resolution), layout_name))
}
