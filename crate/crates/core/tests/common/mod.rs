#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use dynpet::domain::{DynamicImage, FrameSchedule, SinogramSeries};
use dynpet::kinetics::{InputFunction, KineticModel};
use dynpet::metrics::RoiMask;
use dynpet::projector::{Geometry2D, SystemMatrix};
use dynpet::simulate::{build_phantom, synthesize_dynamic_image, Phantom, Region, RegionParams};

/// 64x64 phantom, 90 angles, 96 bins, 24-frame FDG schedule.
pub struct Desk {
    pub geom: Geometry2D,
    pub schedule: FrameSchedule,
    pub model: KineticModel,
    pub phantom: Phantom,
    pub truth: DynamicImage,
    pub a: SystemMatrix,
    pub roi: RoiMask,
}

impl Desk {
    pub fn new() -> Self {
        let geom = Geometry2D::default();
        let schedule = FrameSchedule::fdg_40min();
        let model = KineticModel::new(&InputFunction::default(), &schedule).unwrap();
        let phantom = build_phantom(geom.width, geom.height, &RegionParams::default()).unwrap();
        let truth = synthesize_dynamic_image(&phantom, &model);
        let cache = Path::new(env!("CARGO_TARGET_TMPDIR"));
        let a = SystemMatrix::load_or_build(&geom, cache).unwrap();
        let roi = RoiMask::new(phantom.eroded_mask(Region::GrayMatter)).unwrap();
        Desk {
            geom,
            schedule,
            model,
            phantom,
            truth,
            a,
            roi,
        }
    }

    pub fn problem<'a>(&'a self, data: &'a SinogramSeries) -> dynpet::recon::ReconProblem<'a> {
        dynpet::recon::ReconProblem {
            data,
            system: &self.a,
            model: &self.model,
            width: self.geom.width,
            height: self.geom.height,
        }
    }
}

/// Print one result line past the test harness output capture.
pub fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {id:>2} {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}
