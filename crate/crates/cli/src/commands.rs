use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use pairforge::counting::{analyze_histogram, simulate_coincidences, werner_fidelity, CoincidenceHistogram, ExperimentConfig};
use pairforge::device::{Device, PULSED_EXPERIMENT_JSON, BUNDLED_DEVICE_JSON};
use pairforge::lasermodel::{liv, operating_sweep, operating_window, pairs_per_electron, sweep_to_csv, LinearTrend};
use pairforge::materials::DispersionTable;
use pairforge::modesolver::{find_modes, wavelength_grid, ModeFamily, Polarization, SolverOptions};
use pairforge::nonlinear::{
    degeneracy, extract_loss_fp, fit_shg, pm_center_vs_temperature, shg_bandwidth, shg_spectrum, tuning_curve, CurveSettings, Envelope,
    PhaseMatchCurves, Spectrum,
};
use pairforge::units::{celsius_to_kelvin, kelvin_to_celsius};

use crate::error::Failure;
use crate::manifest::RunManifest;
use crate::svg::{plot, Series};
use crate::{Cli, Command, Format, Global, Pol};

struct Run {
    global: Global,
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<String, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::Schema(format!("{}: {e}", path.display())))?;
        self.manifest.add_input(path, &bytes);
        String::from_utf8(bytes).map_err(|e| Failure::Schema(format!("{}: {e}", path.display())))
    }

    fn table(&mut self) -> Result<DispersionTable, Failure> {
        if let Some(p) = self.global.table.clone() {
            let bytes = std::fs::read(&p).map_err(|e| Failure::Schema(format!("{}: {e}", p.display())))?;
            self.manifest.add_input(&p, &bytes);
        }
        Ok(DispersionTable::resolve(self.global.table.as_deref())?)
    }

    fn device(&mut self, table: &DispersionTable) -> Result<Device, Failure> {
        match self.global.device.clone() {
            Some(p) => {
                let text = self.read(&p)?;
                Device::parse(&text, table).map_err(|e| Failure::Schema(format!("{}: {e}", p.display())))
            }
            None => {
                self.manifest.add_input(Path::new("<bundled>/paper_device.json"), BUNDLED_DEVICE_JSON.as_bytes());
                Ok(Device::parse(BUNDLED_DEVICE_JSON, table)?)
            }
        }
    }

    fn temperature_k(&self, device: &Device) -> f64 {
        self.global.temp_c.map(celsius_to_kelvin).unwrap_or(device.stack.temperature_k)
    }

    fn seed(&mut self) -> u64 {
        let seed = self.global.seed.unwrap_or_else(|| {
            let s = rand::random::<u64>() >> 11;
            eprintln!("seed: {s}");
            s
        });
        self.manifest.seed = Some(seed);
        seed
    }

    fn write_file(&mut self, path: &Path, content: &str) -> Result<(), Failure> {
        std::fs::write(path, content).map_err(|e| Failure::Schema(format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(path.display().to_string());
        Ok(())
    }

    /// Primary output in the requested format, to `--out` or stdout.
    fn emit(&mut self, csv: &str, json: &Value) -> Result<(), Failure> {
        let text = match self.global.format {
            Format::Csv => csv.to_string(),
            Format::Json => serde_json::to_string_pretty(json)? + "\n",
        };
        match self.global.out.clone() {
            Some(p) => self.write_file(&p, &text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn svg(&mut self, render: impl FnOnce() -> String) -> Result<(), Failure> {
        if let Some(p) = self.global.svg.clone() {
            let s = render();
            self.write_file(&p, &s)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(), Failure> {
        if let Some(out) = self.global.out.clone() {
            self.manifest.wall_time_s = self.start.elapsed().as_secs_f64();
            let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
            std::fs::write(RunManifest::path_for(&out), text)?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<(), Failure> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let mut run = Run {
        global: cli.global,
        manifest: RunManifest::new(argv),
        start: Instant::now(),
    };
    match cli.command {
        Command::Modes { wavelength_nm, pol, profiles } => modes(&mut run, wavelength_nm, pol, profiles)?,
        Command::Tune {
            pump_start_nm,
            pump_stop_nm,
            pump_step_nm,
        } => tune(&mut run, pump_start_nm, pump_stop_nm, pump_step_nm)?,
        Command::Shg { power_w, span_nm, step_nm } => shg(&mut run, power_w, span_nm, step_nm)?,
        Command::Fitshg { spectrum, power_w } => fitshg(&mut run, &spectrum, power_w)?,
        Command::Loss {
            spectrum,
            reflectivity,
            length_mm,
        } => loss(&mut run, &spectrum, reflectivity, length_mm)?,
        Command::Operate {
            current_a,
            t_start_c,
            t_stop_c,
            t_step_c,
            pm_points,
        } => operate(&mut run, current_a, (t_start_c, t_stop_c, t_step_c), pm_points)?,
        Command::Coincide { config } => coincide(&mut run, config)?,
        Command::Analyze { histogram, metadata } => analyze(&mut run, &histogram, metadata)?,
        Command::Fidelity { snr } => fidelity(&mut run, snr)?,
    }
    run.finish()
}

fn curves_at(run: &mut Run) -> Result<(Device, DispersionTable, f64, PhaseMatchCurves), Failure> {
    let table = run.table()?;
    let device = run.device(&table)?;
    let t = run.temperature_k(&device);
    run.manifest.config = json!({ "temperature_K": t, "curves": CurveSettings::default() });
    let curves = PhaseMatchCurves::compute(&device.stack, t, &table, &SolverOptions::default(), &CurveSettings::default())?;
    Ok((device, table, t, curves))
}

fn modes(run: &mut Run, wavelength_nm: f64, pol: Pol, profiles: Option<PathBuf>) -> Result<(), Failure> {
    let table = run.table()?;
    let device = run.device(&table)?;
    let t = run.temperature_k(&device);
    let pol = match pol {
        Pol::Te => Polarization::TE,
        Pol::Tm => Polarization::TM,
    };
    run.manifest.config = json!({ "temperature_K": t, "wavelength_nm": wavelength_nm, "polarization": pol });
    let mut stack = device.stack.clone();
    stack.temperature_k = t;
    let found = find_modes(&stack, wavelength_nm, pol, &table, &SolverOptions::default())?;
    let mut csv = String::from("mode,family,order,n_eff_re,n_eff_im,n_g,alpha_cm1,confinement,peak_z_nm\n");
    let mut rows = Vec::new();
    for m in &found {
        let ng = m.group_index.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            m.selector(),
            family(m.family),
            m.order,
            m.n_eff.re,
            m.n_eff.im,
            ng,
            m.alpha_cm1,
            m.confinement,
            m.profile.peak_z_nm()
        );
        rows.push(json!({
            "mode": m.selector().to_string(), "family": m.family, "order": m.order,
            "n_eff_re": m.n_eff.re, "n_eff_im": m.n_eff.im, "n_g": m.group_index,
            "alpha_cm1": m.alpha_cm1, "confinement": m.confinement, "peak_z_nm": m.profile.peak_z_nm(),
        }));
    }
    run.emit(&csv, &json!({ "temperature_K": t, "wavelength_nm": wavelength_nm, "modes": rows }))?;
    if found.is_empty() {
        return Ok(());
    }
    let grid = &found[0].profile;
    let column = |i: usize| -> Vec<f64> { found.iter().map(|m| m.profile.value_at(grid.z_nm(i)).norm()).collect() };
    if let Some(p) = profiles {
        let mut s = String::from("z_nm");
        for m in &found {
            let _ = write!(s, ",{}_abs_E", m.selector());
        }
        s.push('\n');
        for i in 0..grid.values.len() {
            let _ = write!(s, "{}", grid.z_nm(i));
            for v in column(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        run.write_file(&p, &s)?;
    }
    run.svg(|| {
        let series: Vec<Series> = found
            .iter()
            .map(|m| Series::line(&m.selector().to_string(), (0..grid.values.len()).map(|i| (grid.z_nm(i), m.profile.value_at(grid.z_nm(i)).norm())).collect()))
            .collect();
        plot(&format!("Mode profiles at {wavelength_nm} nm"), "z (nm)", "|E| (a.u.)", &series)
    })
}

fn family(f: ModeFamily) -> &'static str {
    match f {
        ModeFamily::Tir => "tir",
        ModeFamily::Bragg => "bragg",
    }
}

fn tune(run: &mut Run, start: Option<f64>, stop: Option<f64>, step: f64) -> Result<(), Failure> {
    if step.is_nan() || step <= 0.0 {
        return Err(Failure::Usage("--pump-step-nm must be positive".into()));
    }
    let (_, _, t, curves) = curves_at(run)?;
    let deg = degeneracy(&curves)?;
    let start = start.unwrap_or(deg - 1.5);
    let stop = stop.unwrap_or(deg + 1.5);
    let grid = wavelength_grid(start, stop, step);
    if grid.is_empty() {
        return Err(Failure::Usage("empty pump range".into()));
    }
    let tc = tuning_curve(&curves, &grid)?;
    run.emit(&tc.to_csv(), &serde_json::to_value(&tc)?)?;
    run.svg(|| {
        let s: Vec<_> = tc.points.iter().map(|p| (p.lambda_p_nm, p.lambda_s_nm)).collect();
        let i: Vec<_> = tc.points.iter().map(|p| (p.lambda_p_nm, p.lambda_i_nm)).collect();
        plot(
            &format!("Tuning curve at {:.2} °C", kelvin_to_celsius(t)),
            "pump wavelength (nm)",
            "wavelength (nm)",
            &[Series::scatter("signal TE00", s), Series::scatter("idler TM00", i)],
        )
    })
}

fn shg(run: &mut Run, power_w: f64, span_nm: f64, step_nm: f64) -> Result<(), Failure> {
    if !(span_nm > 0.0 && step_nm > 0.0) {
        return Err(Failure::Usage("--span-nm and --step-nm must be positive".into()));
    }
    let (device, _, t, curves) = curves_at(run)?;
    let model = device.shg_model(&curves, power_w)?;
    let (center, fwhm) = shg_bandwidth(&curves, model.length_cm)?;
    let grid = wavelength_grid(center - span_nm / 2.0, center + span_nm / 2.0, step_nm);
    let spectrum = shg_spectrum(&model, Envelope::Curves(&curves), &grid)?;
    run.emit(
        &spectrum.to_csv(),
        &json!({ "temperature_K": t, "center_nm": center, "envelope_fwhm_nm": fwhm, "model": model, "spectrum_W": spectrum }),
    )?;
    run.svg(|| {
        let max = spectrum.power.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let pts = spectrum.wavelength_nm.iter().zip(&spectrum.power).map(|(l, p)| (*l, p / max)).collect();
        plot("SHG spectrum", "fundamental wavelength (nm)", "SH power (norm.)", &[Series::line("P_SH", pts)])
    })
}

fn fitshg(run: &mut Run, path: &Path, power_w: f64) -> Result<(), Failure> {
    let text = run.read(path)?;
    let spectrum = Spectrum::from_csv(&text)?;
    let (device, _, _, curves) = curves_at(run)?;
    let template = device.shg_model(&curves, power_w)?;
    let fit = fit_shg(&spectrum, &template)?;
    let mut csv = String::from("parameter,value\n");
    let _ = writeln!(csv, "eta_pct_per_W_cm2,{}", fit.eta_pct_per_w_cm2);
    let _ = writeln!(csv, "center_nm,{}", fit.center_nm);
    let _ = writeln!(csv, "fwhm_nm,{}", fit.fwhm_nm);
    for (name, v) in ["te00", "tm00", "teb"].iter().zip(fit.phases_rad) {
        let _ = writeln!(csv, "phase_{name}_rad,{v}");
    }
    let _ = writeln!(csv, "residual_norm_W,{}", fit.residual_norm);
    let _ = writeln!(csv, "iterations,{}", fit.iterations);
    let _ = writeln!(csv, "degenerate,{}", fit.degenerate);
    run.emit(&csv, &serde_json::to_value(&fit)?)
}

fn loss(run: &mut Run, path: &Path, reflectivity: Option<f64>, length_mm: Option<f64>) -> Result<(), Failure> {
    let text = run.read(path)?;
    let spectrum = Spectrum::from_csv(&text)?;
    let table = run.table()?;
    let device = run.device(&table)?;
    let r = reflectivity.unwrap_or(device.stack.facets.r_te00);
    let length_cm = length_mm.map(|l| l / 10.0).unwrap_or(device.stack.length_cm());
    run.manifest.config = json!({ "reflectivity": r, "length_cm": length_cm });
    let ext = extract_loss_fp(&spectrum, r, length_cm)?;
    let csv = format!("alpha_cm1,alpha_std_cm1,fringes\n{},{},{}\n", ext.alpha_cm1, ext.alpha_std_cm1, ext.fringes);
    run.emit(&csv, &serde_json::to_value(&ext)?)
}

fn operate(run: &mut Run, current_a: f64, (t0, t1, dt): (f64, f64, f64), pm_points: usize) -> Result<(), Failure> {
    if !(t1 > t0 && dt > 0.0) || pm_points < 3 {
        return Err(Failure::Usage("need t-stop > t-start, positive t-step and at least 3 pm points".into()));
    }
    let table = run.table()?;
    let device = run.device(&table)?;
    let diode = *device.diode()?;
    let opts = SolverOptions::default();
    let settings = CurveSettings::default();
    let pm_temps: Vec<f64> = (0..pm_points)
        .map(|i| celsius_to_kelvin(t0 + (t1 - t0) * i as f64 / (pm_points - 1) as f64))
        .collect();
    run.manifest.config = json!({ "current_A": current_a, "pm_temperatures_K": pm_temps, "diode": diode });
    let slope = pm_center_vs_temperature(&device.stack, &pm_temps, &table, &opts, &settings)?;
    let t_mid = pm_temps[pm_points / 2];
    let curves = PhaseMatchCurves::compute(&device.stack, t_mid, &table, &opts, &settings)?;
    let (_, fwhm_fundamental) = shg_bandwidth(&curves, device.stack.length_cm())?;
    let fwhm_pump = fwhm_fundamental / 2.0;
    let pm = LinearTrend {
        reference_temperature_k: t_mid,
        reference_nm: slope.center_at(t_mid),
        slope_nm_per_k: slope.slope_nm_per_k,
    };
    let window = operating_window(&LinearTrend::of_laser(&diode), &pm, fwhm_pump)?;
    let temps: Vec<f64> = wavelength_grid(t0, t1, dt).into_iter().map(celsius_to_kelvin).collect();
    let sweep = operating_sweep(&diode, &pm, fwhm_pump, current_a, &temps);
    let electrical = liv(&diode, current_a)?;
    let pair_yield = match device.nonlinear {
        Some(n) => Some(pairs_per_electron(&diode, current_a, n.measured_pair_probability, pm.at(window.crossing_k))?),
        None => None,
    };
    let report = json!({
        "current_A": current_a,
        "liv": electrical,
        "phase_matching": { "trend": pm, "centers_nm": slope.centers_nm, "temperatures_K": slope.temperatures_k, "fwhm_pump_nm": fwhm_pump },
        "window": window,
        "pair_yield": pair_yield,
        "sweep": sweep,
    });
    run.emit(&sweep_to_csv(&sweep), &report)?;
    run.svg(|| {
        let laser = sweep.iter().map(|p| (p.temperature_k, p.lambda_laser_nm)).collect();
        let pmline = sweep.iter().map(|p| (p.temperature_k, p.lambda_pm_nm)).collect();
        plot(
            "Laser line and phase matching",
            "temperature (K)",
            "pump wavelength (nm)",
            &[Series::line("laser", laser), Series::line("phase matching", pmline)],
        )
    })
}

fn coincide(run: &mut Run, config: Option<PathBuf>) -> Result<(), Failure> {
    let text = match &config {
        Some(p) => run.read(p)?,
        None => {
            run.manifest.add_input(Path::new("<bundled>/pulsed_experiment.json"), PULSED_EXPERIMENT_JSON.as_bytes());
            PULSED_EXPERIMENT_JSON.to_string()
        }
    };
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Failure::Schema(format!("experiment config: {e}")))?;
    cfg.validate()?;
    if run.global.seed.is_none() {
        run.global.seed = cfg.seed;
    }
    let seed = run.seed();
    run.manifest.config = serde_json::to_value(&cfg)?;
    let h = simulate_coincidences(&cfg, seed)?;
    run.emit(&h.to_csv(), &serde_json::to_value(&h)?)?;
    if let (Some(out), Format::Csv) = (run.global.out.clone(), run.global.format) {
        run.write_file(&sidecar(&out), &(h.metadata_json() + "\n"))?;
    }
    run.svg(|| {
        let pts = (0..h.counts.len()).map(|i| (h.bin_center_s(i) * 1e9, h.counts[i] as f64)).collect();
        plot("Coincidence histogram", "delay t1 - t2 (ns)", "counts per bin", &[Series::line("coincidences", pts)])
    })
}

/// `hist.csv` → `hist.meta.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn analyze(run: &mut Run, path: &Path, metadata: Option<PathBuf>) -> Result<(), Failure> {
    let text = run.read(path)?;
    let meta_path = metadata.or_else(|| Some(sidecar(path)).filter(|p| p.exists()));
    let meta = match &meta_path {
        Some(p) => Some(run.read(p)?),
        None => None,
    };
    let h = CoincidenceHistogram::from_csv(&text, meta.as_deref())?;
    let a = analyze_histogram(&h)?;
    let w = werner_fidelity(a.snr.max(0.0))?;
    let csv = format!(
        "peak_delay_s,fwhm_s,window_start_s,window_end_s,window_counts,background_counts,true_coincidences,snr,snr_error,saturated,fidelity\n{:e},{:e},{:e},{:e},{},{},{},{},{},{},{}\n",
        a.peak_delay_s,
        a.fwhm_s,
        a.window_s.0,
        a.window_s.1,
        a.window_counts,
        a.background_counts,
        a.true_coincidences,
        a.snr,
        a.snr_error,
        a.saturated,
        w.fidelity
    );
    run.emit(&csv, &json!({ "analysis": a, "werner": w }))
}

fn fidelity(run: &mut Run, snr: f64) -> Result<(), Failure> {
    let w = werner_fidelity(snr)?;
    let line = format!("P = {:.5}, F = {:.5}\n", w.p, w.fidelity);
    match run.global.format {
        Format::Csv => {
            print!("{line}");
            if let Some(out) = run.global.out.clone() {
                run.write_file(&out, &format!("snr,P,F\n{},{},{}\n", w.snr, w.p, w.fidelity))?;
            }
            Ok(())
        }
        Format::Json => run.emit("", &serde_json::to_value(w)?),
    }
}
