//! Stub external detector speaking the wire protocol on stdio.
//!
//! Modes:
//!   --empty                        never detects anything
//!   --fixed x,y,z,dx,dy,dz,yaw,s   always returns this one proposal
//!   (default)                      one box at the point centroid, score 0.9
//!
//! Useful as a protocol smoke target:
//!   spooflab attack ... --detector "external:cmd:spooflab-stub-detector --empty" --grad fd

use spooflab_core::detector::{encode_response, parse_request, Proposal};
use spooflab_core::geometry::Box3D;
use std::io::{BufRead, Write};

enum Mode {
    Empty,
    Fixed(Proposal),
    Centroid,
}

fn parse_mode() -> Result<Mode, String> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        None => Ok(Mode::Centroid),
        Some("--empty") => Ok(Mode::Empty),
        Some("--fixed") => {
            let spec = args
                .get(1)
                .ok_or("--fixed needs x,y,z,dx,dy,dz,yaw,score")?;
            let v: Vec<f64> = spec
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            if v.len() != 8 {
                return Err("--fixed needs exactly 8 comma-separated values".into());
            }
            Ok(Mode::Fixed(Proposal {
                box3d: Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]),
                confidence: v[7],
            }))
        }
        Some(other) => Err(format!("unknown flag {other}")),
    }
}

fn main() {
    let mode = match parse_mode() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("spooflab-stub-detector: {e}");
            std::process::exit(2);
        }
    };

    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    for line in stdin.lock().lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let request = match parse_request(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("spooflab-stub-detector: bad request: {e}");
                std::process::exit(3);
            }
        };
        let proposals = match &mode {
            Mode::Empty => Vec::new(),
            Mode::Fixed(p) => vec![*p],
            Mode::Centroid => {
                if request.points.is_empty() {
                    Vec::new()
                } else {
                    let n = request.points.len() as f64;
                    let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
                    for p in &request.points {
                        cx += p[0];
                        cy += p[1];
                        cz += p[2];
                    }
                    vec![Proposal {
                        box3d: Box3D::new(cx / n, cy / n, cz / n, 3.9, 1.6, 1.56, 0.0),
                        confidence: 0.9,
                    }]
                }
            }
        };
        let response = encode_response(&proposals);
        if stdout.write_all(response.as_bytes()).is_err() {
            break;
        }
        let _ = stdout.flush();
    }
}
