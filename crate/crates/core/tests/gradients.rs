use crossnet::gradcheck::{self, GradCheck};

const TOL: f64 = 1e-4;

fn assert_ok(c: GradCheck) {
    assert!(c.n_params <= 2000, "{} has {} parameters", c.name, c.n_params);
    assert!(c.n_checked > 0);
    assert!(c.max_rel_err < TOL, "{}: max rel err {:.3e} at {}", c.name, c.max_rel_err, c.worst);
}

#[test]
fn conv_block_and_detection_head() {
    assert_ok(gradcheck::conv_block_detection(101).unwrap());
}

#[test]
fn detection_loss() {
    for seed in 0..5 {
        assert_ok(gradcheck::detection_loss_logits(seed).unwrap());
    }
}

#[test]
fn intent_loss() {
    for seed in 0..5 {
        assert_ok(gradcheck::intent_loss_logits(seed).unwrap());
    }
}

#[test]
fn convlstm_cell() {
    for seed in 0..3 {
        assert_ok(gradcheck::convlstm_cell(seed).unwrap());
    }
}

#[test]
fn auxiliary_two_steps_one_layer() {
    assert_ok(gradcheck::auxiliary_head(7, &[2], 2).unwrap());
}

#[test]
fn auxiliary_three_layers() {
    assert_ok(gradcheck::auxiliary_head(8, &[2, 3, 2], 3).unwrap());
}

#[test]
fn sequential_head() {
    assert_ok(gradcheck::sequential_head(9).unwrap());
}
