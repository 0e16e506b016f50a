use std::fmt::Write as _;

use rayon::prelude::*;

use super::finetune::ProbeModel;
use crate::corruption::ModalitySelection;
use crate::error::Result;
use crate::synthdata::EvalSet;

/// Which streams the probe sees at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    AudioOnly,
    VideoOnly,
    Both,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::AudioOnly, Condition::VideoOnly, Condition::Both];

    pub fn name(self) -> &'static str {
        match self {
            Condition::AudioOnly => "audio-only",
            Condition::VideoOnly => "video-only",
            Condition::Both => "both",
        }
    }

    pub fn selection(self) -> ModalitySelection {
        match self {
            Condition::AudioOnly => ModalitySelection::AudioOnly,
            Condition::VideoOnly => ModalitySelection::VideoOnly,
            Condition::Both => ModalitySelection::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub condition: Condition,
    pub snr_db: f64,
    pub correct: usize,
    pub n_frames: usize,
}

impl AccuracyRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_frames.max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

fn snr_label(snr: f64) -> String {
    if snr.is_infinite() {
        "inf".into()
    } else {
        format!("{snr}")
    }
}

impl AccuracyTable {
    pub fn get(&self, condition: Condition, snr_db: f64) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.condition == condition && r.snr_db == snr_db)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,snr_db,frame_accuracy,n_frames\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.6},{}", r.condition.name(), snr_label(r.snr_db), r.accuracy(), r.n_frames).unwrap();
        }
        s
    }

    /// Condition × SNR grid for terminal output.
    pub fn render(&self) -> String {
        let mut snrs: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !snrs.contains(&r.snr_db) {
                snrs.push(r.snr_db);
            }
        }
        let mut out = format!("{:<12}", "condition");
        for &s in &snrs {
            write!(out, "{:>8}", snr_label(s)).unwrap();
        }
        out.push('\n');
        for c in Condition::ALL {
            if !self.rows.iter().any(|r| r.condition == c) {
                continue;
            }
            write!(out, "{:<12}", c.name()).unwrap();
            for &s in &snrs {
                match self.get(c, s) {
                    Some(r) => write!(out, "{:>8.3}", r.accuracy()).unwrap(),
                    None => write!(out, "{:>8}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Frame accuracy of `probe` for every condition × SNR set.
pub fn evaluate(probe: &ProbeModel, sets: &[EvalSet], conditions: &[Condition]) -> Result<AccuracyTable> {
    let mut rows = Vec::new();
    for &c in conditions {
        for set in sets {
            let counts = set
                .items
                .par_iter()
                .map(|it| {
                    let p = probe.predict(&it.audio, &it.video, c.selection())?;
                    Ok((p.iter().zip(&it.latent_labels).filter(|(a, b)| a == b).count(), p.len()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (correct, n_frames) = counts.iter().fold((0, 0), |a, x| (a.0 + x.0, a.1 + x.1));
            rows.push(AccuracyRow { condition: c, snr_db: set.snr_db, correct, n_frames });
        }
    }
    Ok(AccuracyTable { rows })
}
