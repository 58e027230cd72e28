//! Simulate a noisy dynamic FDG scan of the geometric phantom.

use dynpet::domain::FrameSchedule;
use dynpet::kinetics::{InputFunction, KineticModel};
use dynpet::projector::{Geometry2D, SystemMatrix};
use dynpet::simulate::{build_phantom, simulate_sinograms, synthesize_dynamic_image, RegionParams, Region};

fn main() -> dynpet::error::Result<()> {
    let geom = Geometry2D { width: 32, height: 32, n_angles: 48, n_radial_bins: 48, ..Geometry2D::default() };
    let schedule = FrameSchedule::fdg_40min();
    let model = KineticModel::new(&InputFunction::default(), &schedule)?;
    let phantom = build_phantom(geom.width, geom.height, &RegionParams::default())?;
    for r in Region::TISSUES {
        match phantom.params(r).ki() {
            Ok(ki) => println!("{:>6}: {:4} voxels, Ki = {ki:.2e} 1/s", r.name(), phantom.count(r)),
            Err(_) => println!("{:>6}: {:4} voxels, no tissue uptake", r.name(), phantom.count(r)),
        }
    }

    let truth = synthesize_dynamic_image(&phantom, &model);
    let a = SystemMatrix::build(&geom)?;
    let data = simulate_sinograms(&truth, &a, &schedule, 1e6, 0.2, 42)?;
    println!("{} frames x {} bins, {} counts in total", data.n_frames(), data.n_bins(), data.total_counts());
    let mids = schedule.frame_mid_times();
    for m in [0, 11, 18, 23] {
        let counts: f64 = data.counts_frame(m).iter().sum();
        println!("frame {m:2} (mid {:6.0} s, {:3.0} s long): {counts:8.0} counts", mids[m], schedule.durations()[m]);
    }
    Ok(())
}
