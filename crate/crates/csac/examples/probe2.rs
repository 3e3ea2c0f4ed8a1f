// probe a trained checkpoint: policy saturation and critic action-sensitivity
use csac::ckpt::Checkpoint;
use csac::harness::load_agents;
use csac::maze::{builtin_maze, MazeEnv, Scale};
use csac::tensor::Tensor;

fn main() {
    let ck = Checkpoint::load(std::path::Path::new("/tmp/learn3_uncooperative/ckpt_final.ckpt")).unwrap();
    let (_, agents) = load_agents(&ck).unwrap();
    let spec = builtin_maze(2, Scale::Desk).unwrap();
    let env = MazeEnv::new(spec.clone());

    // agent 2 at the parking spot (5.71, 3.51) heading 0 and near-goal states
    let mut env2 = env.clone();
    for (label, x, y, th) in [
        ("park", 5.71, 3.51, 0.0),
        ("above goal", 5.5, 3.0, -1.57),
        ("at goal edge", 5.5, 2.8, -1.57),
        ("room2 center", 4.8, 2.2, 0.0),
    ] {
        env2.force_state(x, y, th).unwrap();
        let obs = env2.observe().to_vec();
        let a = &agents[1];
        let mean_act = a.act_deterministic(&obs).unwrap();
        // critic2 sensitivity across 5 actions
        let obs_t = Tensor::new(1, obs.len(), obs.clone());
        let mut qvals = vec![];
        for act in [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
            let at = Tensor::new(1, 2, act.to_vec());
            qvals.push(a.min_q(&obs_t, &at).unwrap().item());
        }
        println!("{label}: mean_action=({:.3},{:.3}) Q[0,+v,-v,+w,-w]={:?}",
            mean_act[0], mean_act[1],
            qvals.iter().map(|q| (q*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
    // how saturated is the policy trunk? count dead relu units over a batch of states
    let a = &agents[1];
    let mut dead = [0usize; 2];
    let mut total = [0usize; 2];
    let mut r = csac::seeding::seeded_rng(5, 0);
    use rand::Rng;
    for _ in 0..200 {
        let x = r.gen_range(3.0..6.0);
        let y = r.gen_range(0.0..4.5);
        if !spec.in_free_space(x, y) { continue; }
        env2.force_state(x, y, r.gen_range(-3.1..3.1)).unwrap();
        let obs = env2.observe().to_vec();
        let scaled = a.scale_obs(&Tensor::new(1, obs.len(), obs));
        // manual forward through trunk
        let mut h = scaled;
        for (l, layer) in a.policy.net.layers.iter().enumerate() {
            let mut tape = csac::tensor::Tape::new();
            let hv = tape.constant(&h);
            let wv = tape.constant(&layer.w);
            let bv = tape.constant(&layer.b);
            let mm = tape.matmul(hv, wv);
            let out = tape.add_bias(mm, bv);
            let mut vals = tape.value(out);
            if l + 1 < a.policy.net.layers.len() {
                for v in vals.data_mut() { 
                    if *v <= 0.0 { dead[l] += 1; }
                    total[l] += 1;
                    *v = v.max(0.0);
                }
            }
            h = vals;
        }
    }
    println!("dead relu fraction per hidden layer: {:.2} {:.2}",
        dead[0] as f64 / total[0] as f64, dead[1] as f64 / total[1] as f64);
    println!("alpha_2 = {}", agents[1].alpha());
}
