// quick probe: crossing statistics under uniform random actions
use csac::maze::{builtin_maze, MazeEnv, ResetMode, Scale};
use csac::seeding::seeded_rng;
use rand::Rng;

fn main() {
    for seed in [99u64, 7, 23] {
    for (label, rooms) in [("2-room", 2usize), ("3-room", 3usize)] {
        let spec = builtin_maze(rooms, Scale::Desk).unwrap();
        let mut env = MazeEnv::new(spec.clone());
        let mut rng = seeded_rng(seed, 0);
        let mut bonuses = vec![0usize; rooms];
        let mut steps = 0usize;
        while steps < 20_000 {
            env.reset(ResetMode::Exploration, &mut rng);
            for _ in 0..300 {
                let a = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let r = env.step(a).unwrap();
                steps += 1;
                for (j, &rj) in r.rewards.iter().enumerate() {
                    if rj > 0.0 { bonuses[j] += 1; }
                }
                if r.done || steps >= 20_000 { break; }
            }
        }
        println!("seed {seed} {label}: bonuses per 20k random steps: {bonuses:?}");
    }
    }
}
