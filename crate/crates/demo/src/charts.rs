//! Chart builders behind the browser demo.
//!
//! Each public function runs a small experiment on the stock eight-mode ring
//! model and renders the result as a standalone SVG document. Everything
//! here is plain Rust so the builders are unit-testable natively; `lib.rs`
//! adds the thin browser bindings.
//!
//! All inputs arrive as primitives (strings, floats, small integers) because
//! the browser side passes slider values straight through. Invalid inputs
//! come back as `Err(String)` so the page can show the message instead of a
//! chart.

use guidance_lab::diagnostics::{manifold_proxy, nearest_component, track_loss};
use guidance_lab::guidance::GuidanceMode;
use guidance_lab::harness::svg::{LineChart, Series};
use guidance_lab::inversion::roundtrip;
use guidance_lab::rng::{slot, RunKey};
use guidance_lab::schedule::{GridDirection, NoiseSchedule, TimestepGrid};
use guidance_lab::score::{Condition, GaussianMixture};
use guidance_lab::solver::{sample, SolverKind, SolverSpec, Trajectory};

/// Reconstruction-curve step counts, smallest to largest.
const LADDER: [usize; 4] = [25, 50, 100, 200];

fn mode_from(style: &str, scale: f64) -> Result<GuidanceMode, String> {
    let mode = match style {
        "uncond" => GuidanceMode::Uncond,
        "cfg" => GuidanceMode::Cfg(scale),
        "cfgpp" => GuidanceMode::CfgPp(scale),
        other => {
            return Err(format!(
                "unknown guidance style {other:?} (expected uncond, cfg, or cfgpp)"
            ))
        }
    };
    mode.validate().map_err(|e| e.to_string())?;
    Ok(mode)
}

fn mode_label(style: &str, scale: f64) -> String {
    match style {
        "uncond" => "uncond".to_string(),
        _ => format!("{style} {scale}"),
    }
}

fn check_class(model: &GaussianMixture, class_index: usize) -> Result<Condition, String> {
    if class_index >= model.num_components() {
        return Err(format!(
            "class {class_index} out of range for the {}-component ring",
            model.num_components()
        ));
    }
    Ok(Condition::Class(class_index))
}

fn check_nfe(nfe: usize) -> Result<usize, String> {
    if !(2..=400).contains(&nfe) {
        return Err(format!("nfe must lie in 2..=400, got {nfe}"));
    }
    Ok(nfe)
}

fn run_trajectory(
    model: &GaussianMixture,
    schedule: &NoiseSchedule,
    nfe: usize,
    mode: &GuidanceMode,
    cond: &Condition,
    seed: u32,
) -> Result<Trajectory, String> {
    let grid = TimestepGrid::uniform(schedule.train_steps(), nfe, GridDirection::Sampling)
        .map_err(|e| e.to_string())?;
    sample(
        model,
        schedule,
        &grid,
        mode,
        &SolverSpec::new(SolverKind::Ddim),
        cond,
        RunKey::new(seed as u64, 0),
        None,
    )
    .map_err(|e| e.to_string())
}

/// Phase plot of one guided DDIM run on the ring: the eight component
/// centers, the trajectory from the initial noise down to the final state,
/// and a caption with the landing diagnostics.
pub fn trajectory_svg(
    style: &str,
    scale: f64,
    nfe: usize,
    seed: u32,
    class_index: usize,
) -> Result<String, String> {
    let model = GaussianMixture::default_ring8();
    let schedule = NoiseSchedule::default_vp_linear();
    let mode = mode_from(style, scale)?;
    let cond = check_class(&model, class_index)?;
    let traj = run_trajectory(&model, &schedule, check_nfe(nfe)?, &mode, &cond, seed)?;

    let path: Vec<(f64, f64)> = traj.records.iter().map(|r| (r.x[0], r.x[1])).collect();
    let end = traj.final_state();
    let landed = nearest_component(end, &model).map_err(|e| e.to_string())?;
    let proxy = manifold_proxy(end, &model).map_err(|e| e.to_string())?;

    // Square plot, symmetric data range wide enough for the initial noise.
    let reach = path
        .iter()
        .flat_map(|(x, y)| [x.abs(), y.abs()])
        .fold(1.6_f64, f64::max)
        * 1.08;
    const SIDE: f64 = 480.0;
    const PAD: f64 = 40.0;
    let map = |v: f64| PAD + (v + reach) / (2.0 * reach) * (SIDE - 2.0 * PAD);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIDE}\" height=\"{SIDE}\" \
         viewBox=\"0 0 {SIDE} {SIDE}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{} &#183; nfe {} &#183; seed {} &#183; class {}</text>\n",
        SIDE / 2.0,
        mode_label(style, scale),
        nfe,
        seed,
        class_index
    ));
    out.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{0:.1}\" height=\"{0:.1}\" fill=\"none\" stroke=\"#ccc\"/>\n",
        SIDE - 2.0 * PAD
    ));
    // Component centers with a three-sigma halo; the conditioned one is red.
    let halo = 3.0 * model.component_std() / (2.0 * reach) * (SIDE - 2.0 * PAD);
    for (k, mean) in model.means().iter().enumerate() {
        let (cx, cy) = (map(mean[0]), map(-mean[1]));
        let color = if k == class_index { "#d62728" } else { "#999" };
        out.push_str(&format!(
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"{halo:.1}\" fill=\"none\" stroke=\"{color}\"/>\n"
        ));
        out.push_str(&format!(
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"2.5\" fill=\"{color}\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{color}\">{k}</text>\n",
            cx,
            cy - halo - 5.0
        ));
    }
    // Trajectory: polyline plus start and end markers.
    let pts: Vec<String> = path
        .iter()
        .map(|(x, y)| format!("{:.1},{:.1}", map(*x), map(-*y)))
        .collect();
    out.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        pts.join(" ")
    ));
    let (sx, sy) = (map(path[0].0), map(-path[0].1));
    let (ex, ey) = (map(end[0]), map(-end[1]));
    out.push_str(&format!(
        "<circle cx=\"{sx:.1}\" cy=\"{sy:.1}\" r=\"4\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n"
    ));
    out.push_str(&format!(
        "<circle cx=\"{ex:.1}\" cy=\"{ey:.1}\" r=\"4\" fill=\"#1f77b4\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">final ({:.3}, {:.3}) &#183; nearest component {} &#183; off-ring distance {:.2} std</text>\n",
        SIDE / 2.0,
        SIDE - 12.0,
        end[0],
        end[1],
        landed,
        proxy
    ));
    out.push_str("</svg>\n");
    Ok(out)
}

/// Round-trip reconstruction error against step count for one matched pair
/// of scales: plain guidance at `omega` next to guided denoising at
/// `lambda`, averaged over paired mixture-prior samples.
pub fn roundtrip_svg(lambda: f64, omega: f64, samples: u32, class_index: usize) -> Result<String, String> {
    if !(1..=200).contains(&samples) {
        return Err(format!("sample count must lie in 1..=200, got {samples}"));
    }
    let model = GaussianMixture::default_ring8();
    let schedule = NoiseSchedule::default_vp_linear();
    let cond = check_class(&model, class_index)?;
    let modes = [
        (mode_label("cfgpp", lambda), mode_from("cfgpp", lambda)?),
        (mode_label("cfg", omega), mode_from("cfg", omega)?),
    ];

    let mut series = Vec::new();
    for (label, mode) in &modes {
        let mut points = Vec::new();
        for &nfe in &LADDER {
            let mut total = 0.0;
            for seed in 0..samples {
                let x0 = model
                    .sample_prior(
                        &Condition::Null,
                        &mut RunKey::new(seed as u64, 0).stream(slot::PRIOR),
                    )
                    .map_err(|e| e.to_string())?;
                total += roundtrip(&x0, &model, &schedule, nfe, mode, &cond)
                    .map_err(|e| e.to_string())?
                    .l2_error;
            }
            points.push((nfe as f64, total / samples as f64));
        }
        series.push(Series {
            label: label.clone(),
            points,
        });
    }

    LineChart {
        title: format!("invert-then-sample error, {samples} prior samples, class {class_index}"),
        x_label: "steps".to_string(),
        y_label: "mean reconstruction error".to_string(),
        series,
    }
    .render()
    .map_err(|e| e.to_string())
}

/// Conditional-loss traces of a plain-guidance run and a guided-denoising
/// run from the same seed; each trace measures the distance from the run's
/// final state back to the conditional denoised estimate at every step.
pub fn loss_trace_svg(
    omega: f64,
    lambda: f64,
    nfe: usize,
    seed: u32,
    class_index: usize,
) -> Result<String, String> {
    let model = GaussianMixture::default_ring8();
    let schedule = NoiseSchedule::default_vp_linear();
    let cond = check_class(&model, class_index)?;
    let nfe = check_nfe(nfe)?;
    let modes = [
        (mode_label("cfg", omega), mode_from("cfg", omega)?),
        (mode_label("cfgpp", lambda), mode_from("cfgpp", lambda)?),
    ];

    let mut series = Vec::new();
    for (label, mode) in &modes {
        let traj = run_trajectory(&model, &schedule, nfe, mode, &cond, seed)?;
        let trace = track_loss(&traj, &model, &schedule, &cond).map_err(|e| e.to_string())?;
        series.push(Series {
            label: label.clone(),
            points: trace
                .points
                .iter()
                .map(|(step, v)| (*step as f64, *v))
                .collect(),
        });
    }

    LineChart {
        title: format!("distance to final state, nfe {nfe}, seed {seed}, class {class_index}"),
        x_label: "step".to_string(),
        y_label: "squared distance".to_string(),
        series,
    }
    .render()
    .map_err(|e| e.to_string())
}
