//! Conformance child for the external embedder protocol.
//!
//! Computes per-channel block means over a `--grid g` partition. Fault flags
//! exist for tests: `--die-after n` exits mid-request after n responses,
//! `--dim-zero` advertises dimension 0, `--bad-id` echoes a wrong id,
//! `--sleep-ms t` delays every response, `--nan` answers NaN.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;
use std::time::Duration;

use rics::embedding::protocol::{encode_response, read_request};
use rics::image::ImageBuf;

#[derive(Default)]
struct Opts {
    grid: usize,
    die_after: Option<u64>,
    dim_zero: bool,
    bad_id: bool,
    sleep_ms: u64,
    nan: bool,
}

fn parse() -> Result<Opts, String> {
    let mut o = Opts {
        grid: 2,
        ..Default::default()
    };
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let mut value = |name: &str| -> Result<u64, String> {
            args.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| format!("{name} needs an integer"))
        };
        match a.as_str() {
            "--grid" => o.grid = value("--grid")? as usize,
            "--die-after" => o.die_after = Some(value("--die-after")?),
            "--sleep-ms" => o.sleep_ms = value("--sleep-ms")?,
            "--dim-zero" => o.dim_zero = true,
            "--bad-id" => o.bad_id = true,
            "--nan" => o.nan = true,
            other => return Err(format!("unknown argument {other}")),
        }
    }
    if o.grid == 0 {
        return Err("--grid must be positive".into());
    }
    Ok(o)
}

fn block_means(img: &ImageBuf, g: usize) -> Vec<f64> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let bound = |b: usize, n: usize| (b * n + g - 1) / g;
    let mut out = Vec::with_capacity(ch * g * g);
    for c in 0..ch {
        for by in 0..g {
            for bx in 0..g {
                let (r0, r1, c0, c1) = (bound(by, h), bound(by + 1, h), bound(bx, w), bound(bx + 1, w));
                let mut sum = 0u64;
                for r in r0..r1 {
                    for x in c0..c1 {
                        sum += img.pixels()[(r * w + x) * ch + c] as u64;
                    }
                }
                out.push(sum as f64 / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

fn main() -> ExitCode {
    let opts = match parse() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("embed-child: {e}");
            return ExitCode::from(2);
        }
    };
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut out = io::stdout().lock();

    let mut hello = String::new();
    if input.read_line(&mut hello).unwrap_or(0) == 0 {
        return ExitCode::SUCCESS;
    }
    let dim = if opts.dim_zero { 0 } else { 3 * opts.grid * opts.grid };
    if writeln!(out, "{{\"proto\":1,\"dim\":{dim}}}").and_then(|_| out.flush()).is_err() {
        return ExitCode::FAILURE;
    }

    let mut served = 0u64;
    loop {
        let (id, img) = match read_request(&mut input) {
            Ok(Some(r)) => r,
            Ok(None) => return ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("embed-child: {e}");
                return ExitCode::FAILURE;
            }
        };
        if opts.die_after == Some(served) {
            std::process::exit(3);
        }
        if img.channels() != 3 {
            eprintln!("embed-child: expected 3 channels, got {}", img.channels());
            return ExitCode::FAILURE;
        }
        if opts.sleep_ms > 0 {
            std::thread::sleep(Duration::from_millis(opts.sleep_ms));
        }
        let mut values = block_means(&img, opts.grid);
        if opts.nan {
            values[0] = f64::NAN;
        }
        let id = if opts.bad_id { id.wrapping_add(1) } else { id };
        if out.write_all(&encode_response(id, &values)).and_then(|_| out.flush()).is_err() {
            return ExitCode::FAILURE;
        }
        served += 1;
    }
}
