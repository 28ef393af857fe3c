// debug: which param disagrees in merge-stage FD check
use higda::local_graph::*;
use higda::numerics::*;

fn main() {
    let cfg = LoGConfig {
        embed_dim: 4, layers: 2, k_neighbors: 2, patch_size: 4, merge_2x2: true,
        ..Default::default()
    };
    let mut state = ModelState::new();
    let mut ctx = RunContext::from_seed(17);
    let params = LogParams::init(&cfg, 16, &mut state, &mut ctx).unwrap();
    let img = Tensor::from_fn(&[16, 16, 3], |i| ((i * 3 + 2) % 17) as f64 / 17.0);

    let loss = |st: &ModelState| -> f64 {
        let snap = st.snapshot();
        let mut tape = Tape::new(Precision::F64);
        let tr = log_forward_tape(&mut tape, &snap, &img, &cfg, &params).unwrap();
        let sq = tape.sum_squares(tr.global);
        tape.value(sq).item().unwrap()
    };
    let snap = state.snapshot();
    let mut tape = Tape::new(Precision::F64);
    let tr = log_forward_tape(&mut tape, &snap, &img, &cfg, &params).unwrap();
    let sq = tape.sum_squares(tr.global);
    let tg = tape.backward(sq, None).unwrap();
    let mut grads = Grads::new(&state);
    tape.export_param_grads(&tg, &mut grads).unwrap();
    grads.fill_missing_with_zeros(&state);

    let eps = 1e-5;
    for id in 0..state.len() {
        let n = state.param(id).value.len();
        let name = state.param(id).name.clone();
        let mut worst = 0.0; let mut worst_i = 0; let mut worst_fd = 0.0; let mut worst_an = 0.0;
        for i in 0..n.min(12) {
            let orig = state.param(id).value.data()[i];
            state.param_mut(id).value.data_mut()[i] = orig + eps;
            let plus = loss(&state);
            state.param_mut(id).value.data_mut()[i] = orig - eps;
            let minus = loss(&state);
            state.param_mut(id).value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let an = grads.get(id).unwrap().data()[i];
            let rel = (an - fd).abs() / fd.abs().max(1.0);
            if rel > worst { worst = rel; worst_i = i; worst_fd = fd; worst_an = an; }
        }
        if worst > 1e-5 {
            println!("{name}: worst rel {worst:.3e} at {worst_i} fd={worst_fd:.6} analytic={worst_an:.6}");
        }
    }
}
