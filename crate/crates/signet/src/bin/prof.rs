fn main() {
    use signet::autodiff::{Tape, Var};
    use signet::data::ValidPixelSet;
    use signet::metrics::*;
    use signet::model::*;
    use signet::rng::Rng;
    use signet::train::prepare_samples;
    use signet::synth::generate_scenes;
    let net_cfg = NetworkConfig { bands_n: 3, ..NetworkConfig::toy() };
    let (net, mut store) = SigNet::build(net_cfg, 34).unwrap();
    let mut jitter = Rng::new(35);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            if *v == 0.0 { *v = jitter.range(-0.05, 0.05); }
        }
    }
    let scene = &generate_scenes(36, 1, 8, 8)[0];
    let sample = prepare_samples(&net, std::slice::from_ref(scene), 0.2, 36).unwrap().remove(0);
    let (gt, coarse, denoised, rgb) = (sample.gt.clone(), sample.coarse.clone(), sample.denoised.clone(), sample.rgb.clone());
    let objective = |store: &signet::nn::ParamStore, tape: &mut Tape| -> Var {
        let bound = store.bind(tape);
        let out = net.forward_on_tape(tape, &bound, &denoised, &rgb);
        let valid = ValidPixelSet::all(8, 8);
        let l_r = loss_reconstruction_var(tape, out.y_mm, &gt, &valid);
        let l_d = loss_degradation_var(tape, out.y_mm, out.kernel.unwrap(), &coarse);
        let s = tape.scale(l_d, 0.1);
        tape.add(l_r, s)
    };
    // analytic gradient for the failing element
    let id = store.find("img_extractor.group0.block1.conv1.w").unwrap();
    let pid_index = store.ids().position(|i| i == id).unwrap();
    let mut tape = Tape::new();
    let root = objective(&store, &mut tape);
    println!("loss value {}", tape.value(root).item());
    let grads = tape.backward(root);
    let an = grads.get_or_zeros(Var::from_id(pid_index), store.get(id).shape());
    let e = 598;
    println!("analytic {:.12e}", an.data()[e]);
    for h in [1e-7, 1e-6, 1e-5, 1e-4, 1e-3] {
        let theta = store.get(id).data()[e];
        store.get_mut(id).data_mut()[e] = theta + h;
        let mut tp = Tape::new();
        let rp = objective(&store, &mut tp);
        let plus = tp.value(rp).item();
        store.get_mut(id).data_mut()[e] = theta - h;
        let mut tm = Tape::new();
        let rm = objective(&store, &mut tm);
        let minus = tm.value(rm).item();
        store.get_mut(id).data_mut()[e] = theta;
        let fd = (plus - minus) / (2.0 * h);
        println!("h {h:.0e}: fd {fd:.12e}  rel {:.3e}", (fd - an.data()[e]).abs() / fd.abs().max(1e-9));
    }
}
