// Deterministic synthetic gait generator.
//
// Each subject gets demographic metadata plus a latent gait signature that
// wires the attributes into the rendered geometry, so every label is
// learnable from the data:
//   * torso width grows with BMI,
//   * stride frequency falls with age,
//   * the shoulder/hip width ratio separates the sexes,
//   * limb proportions, stature, and phase give each subject an identity.
//
// A 2D articulated walker (sinusoidal joint angles) is rasterized as filled
// capsules into 64x44 binary masks; the same joint angles are emitted as
// the pose block of the 82-dim pose/shape vector (23 joints x 3 axis-angle
// + 10 shape coefficients + 3 root orientation), so the two streams are
// frame-aligned by construction. Optional per-range pixel noise simulates
// capture-distance degradation.

#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <vector>

#include "combogait/data.hpp"

namespace combogait {

constexpr double kPi = 3.14159265358979323846;

struct GaitSignature {
    double stride_freq = 0.12;   // gait cycles per frame; decreases with age
    double stride_amp = 0.35;    // hip swing amplitude (radians)
    double torso_width = 8.0;    // full torso width in pixels; grows with bmi
    double shoulder_hip = 1.0;   // shoulder width / hip width; sex-dependent
    double body_px = 52.0;       // figure height in pixels
    double leg_frac = 0.50;      // leg length as a fraction of body height
    double arm_swing = 0.8;      // arm counter-swing factor
    double head_r = 3.6;         // head radius in pixels
    double knee_bend = 0.65;     // knee flexion amplitude
    double limb_r = 1.5;         // limb capsule radius
    double bounce = 0.5;         // vertical pelvis oscillation in pixels
    double wobble = 0.04;        // off-axis joint noise amplitude
};

// ---------------------------------------------------------------------------
// Subject synthesis
// ---------------------------------------------------------------------------

// Deterministic in (seed, subject_index). Metadata ranges: age 18-85 years,
// height 52-81 in, weight 93-438 lb, bmi 14.23-68.65 (weight is derived
// from a target bmi and clamped, then bmi recomputed, so all four ranges
// hold simultaneously).
inline std::pair<SubjectMeta, GaitSignature> generate_subject(uint64_t seed,
                                                              int64_t subject_index) {
    Rng rng(Rng::mix(seed, uint64_t(subject_index) + 0x5375626aULL));
    SubjectMeta meta;
    {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "S%04d", int(subject_index));
        meta.subject_id = buf;
    }
    meta.age = rng.uniform(18.0, 85.0);
    meta.sex = rng.bernoulli(0.5) ? Sex::male : Sex::female;
    meta.height_in = rng.uniform(52.0, 81.0);
    const double target_bmi = rng.uniform(14.23, 68.65);
    double weight = target_bmi * meta.height_in * meta.height_in / 703.0;
    weight = std::clamp(weight, 93.0, 438.0);
    meta.weight_lb = weight;
    meta.bmi = compute_bmi(meta.height_in, meta.weight_lb);

    GaitSignature sig;
    sig.stride_freq = 0.14 - 0.05 * (meta.age - 18.0) / 67.0 + rng.uniform(-0.006, 0.006);
    sig.stride_amp = rng.uniform(0.28, 0.42);
    sig.torso_width = 4.5 + (meta.bmi - 14.0) * (9.0 / 55.0) + rng.uniform(-0.3, 0.3);
    sig.shoulder_hip = meta.sex == Sex::male ? rng.uniform(1.18, 1.32)
                                             : rng.uniform(0.84, 0.96);
    sig.body_px = 46.0 + (meta.height_in - 52.0) * (10.0 / 29.0) + rng.uniform(-0.5, 0.5);
    sig.leg_frac = rng.uniform(0.46, 0.54);
    sig.arm_swing = rng.uniform(0.55, 1.0);
    sig.head_r = rng.uniform(3.0, 4.2);
    sig.knee_bend = rng.uniform(0.45, 0.8);
    sig.limb_r = 1.25 + 0.35 * (meta.bmi - 14.0) / 55.0 + rng.uniform(-0.05, 0.05);
    sig.bounce = rng.uniform(0.3, 0.8);
    sig.wobble = rng.uniform(0.02, 0.06);
    return {meta, sig};
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

namespace walker {

constexpr int64_t kFrameH = 64;
constexpr int64_t kFrameW = 44;

inline void draw_capsule(uint8_t* frame, double x1, double y1, double x2, double y2,
                         double r) {
    const int64_t y_lo = std::max<int64_t>(0, int64_t(std::floor(std::min(y1, y2) - r)));
    const int64_t y_hi = std::min<int64_t>(kFrameH - 1, int64_t(std::ceil(std::max(y1, y2) + r)));
    const int64_t x_lo = std::max<int64_t>(0, int64_t(std::floor(std::min(x1, x2) - r)));
    const int64_t x_hi = std::min<int64_t>(kFrameW - 1, int64_t(std::ceil(std::max(x1, x2) + r)));
    const double dx = x2 - x1, dy = y2 - y1;
    const double len2 = dx * dx + dy * dy;
    for (int64_t py = y_lo; py <= y_hi; ++py) {
        for (int64_t px = x_lo; px <= x_hi; ++px) {
            const double qx = double(px) - x1, qy = double(py) - y1;
            double t = len2 > 0.0 ? (qx * dx + qy * dy) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double ex = qx - t * dx, ey = qy - t * dy;
            if (ex * ex + ey * ey <= r * r) frame[py * kFrameW + px] = 1;
        }
    }
}

// One frame of the walking figure at gait phase phi (radians).
inline void render_frame(const GaitSignature& sig, double view_angle, double phi,
                         uint8_t* frame) {
    std::fill(frame, frame + kFrameH * kFrameW, uint8_t(0));

    // How much of the sagittal swing and of the body width the camera sees.
    const double swing_vis = 0.25 + 0.75 * std::abs(std::sin(view_angle));
    const double width_vis = 0.60 + 0.40 * std::abs(std::cos(view_angle));

    const double ground_y = 60.0;
    const double leg_len = sig.leg_frac * sig.body_px;
    const double neck = 1.5;
    const double torso_len = sig.body_px - leg_len - 2.0 * sig.head_r - neck;
    const double pelvis_y = ground_y - leg_len - sig.bounce * std::abs(std::cos(phi));
    const double shoulder_y = pelvis_y - torso_len;
    const double cx = 21.5 + 0.6 * std::sin(phi) * (1.0 - swing_vis);

    const double hip_halfw = 0.5 * sig.torso_width * width_vis;
    const double shoulder_halfw = hip_halfw * sig.shoulder_hip;

    // Torso: a filled trapezoid from shoulders to hips.
    {
        const int64_t y_lo = std::max<int64_t>(0, int64_t(std::floor(shoulder_y)));
        const int64_t y_hi = std::min<int64_t>(kFrameH - 1, int64_t(std::ceil(pelvis_y)));
        for (int64_t py = y_lo; py <= y_hi; ++py) {
            const double t = (double(py) - shoulder_y) / std::max(1.0, pelvis_y - shoulder_y);
            const double hw = shoulder_halfw + (hip_halfw - shoulder_halfw) * std::clamp(t, 0.0, 1.0);
            const int64_t x_lo = std::max<int64_t>(0, int64_t(std::floor(cx - hw)));
            const int64_t x_hi = std::min<int64_t>(kFrameW - 1, int64_t(std::ceil(cx + hw)));
            for (int64_t px = x_lo; px <= x_hi; ++px) {
                if (std::abs(double(px) - cx) <= hw) frame[py * kFrameW + px] = 1;
            }
        }
    }

    // Head.
    const double head_cy = shoulder_y - neck - sig.head_r;
    draw_capsule(frame, cx, head_cy, cx, head_cy, sig.head_r);

    // Legs and arms, one per side; arms counter-swing.
    const double thigh = 0.54 * leg_len, shin = 0.46 * leg_len;
    const double upper_arm = 0.42 * torso_len + 4.0, fore_arm = 0.38 * torso_len + 3.5;
    for (int side = 0; side < 2; ++side) {
        const double sgn = side == 0 ? -1.0 : 1.0;
        const double ph = phi + (side == 0 ? 0.0 : kPi);

        const double hip_angle = sig.stride_amp * std::sin(ph);
        const double knee_angle = sig.knee_bend * std::max(0.0, std::sin(ph - 0.5)) + 0.05;
        const double hip_x = cx + sgn * hip_halfw * 0.55;
        const double knee_x = hip_x + thigh * std::sin(hip_angle) * swing_vis;
        const double knee_y = pelvis_y + thigh * std::cos(hip_angle);
        const double foot_x = knee_x + shin * std::sin(hip_angle - knee_angle) * swing_vis;
        const double foot_y = knee_y + shin * std::cos(hip_angle - knee_angle);
        draw_capsule(frame, hip_x, pelvis_y, knee_x, knee_y, sig.limb_r);
        draw_capsule(frame, knee_x, knee_y, foot_x, foot_y, sig.limb_r * 0.85);

        const double arm_angle = -sig.arm_swing * sig.stride_amp * std::sin(ph);
        const double sh_x = cx + sgn * shoulder_halfw * 0.85;
        const double elbow_x = sh_x + upper_arm * std::sin(arm_angle) * swing_vis;
        const double elbow_y = shoulder_y + upper_arm * std::cos(arm_angle);
        const double hand_x = elbow_x + fore_arm * std::sin(arm_angle + 0.25) * swing_vis;
        const double hand_y = elbow_y + fore_arm * std::cos(arm_angle + 0.25);
        draw_capsule(frame, sh_x, shoulder_y, elbow_x, elbow_y, sig.limb_r * 0.8);
        draw_capsule(frame, elbow_x, elbow_y, hand_x, hand_y, sig.limb_r * 0.7);
    }
}

// Pose-block joint order (x component carries the sagittal rotation the
// renderer uses; y/z carry small bounded wobble):
//   0 L_hip   1 R_hip   2 spine1  3 L_knee  4 R_knee  5 spine2
//   6 L_ankle 7 R_ankle 8 spine3  9 L_foot 10 R_foot 11 neck
//  12 L_collar 13 R_collar 14 head 15 L_shoulder 16 R_shoulder
//  17 L_elbow 18 R_elbow 19 L_wrist 20 R_wrist 21 L_hand 22 R_hand
inline void emit_smpl_frame(const GaitSignature& sig, const SubjectMeta& meta,
                            double view_angle, double phi, float* out) {
    for (int i = 0; i < 82; ++i) out[i] = 0.0f;
    auto set_joint_x = [&](int joint, double v) { out[joint * 3] = float(v); };

    const double hip_l = sig.stride_amp * std::sin(phi);
    const double hip_r = sig.stride_amp * std::sin(phi + kPi);
    const double knee_l = sig.knee_bend * std::max(0.0, std::sin(phi - 0.5)) + 0.05;
    const double knee_r = sig.knee_bend * std::max(0.0, std::sin(phi + kPi - 0.5)) + 0.05;
    const double arm_l = -sig.arm_swing * sig.stride_amp * std::sin(phi);
    const double arm_r = -sig.arm_swing * sig.stride_amp * std::sin(phi + kPi);

    set_joint_x(0, hip_l);
    set_joint_x(1, hip_r);
    set_joint_x(3, -knee_l);
    set_joint_x(4, -knee_r);
    set_joint_x(6, 0.3 * hip_l);
    set_joint_x(7, 0.3 * hip_r);
    set_joint_x(15, arm_l);
    set_joint_x(16, arm_r);
    set_joint_x(17, 0.25 + 0.2 * arm_l);
    set_joint_x(18, 0.25 + 0.2 * arm_r);
    set_joint_x(11, 0.05 * std::sin(2.0 * phi));
    // Bounded off-axis wobble so no component is exactly constant.
    for (int j = 0; j < 23; ++j) {
        out[j * 3 + 1] = float(sig.wobble * std::sin(phi + 1.7 * j));
        out[j * 3 + 2] = float(sig.wobble * std::cos(phi + 0.9 * j));
    }

    // Shape coefficients (unitless, bounded well inside [-3, 3]).
    float* beta = out + 69;
    beta[0] = float((meta.bmi - 25.0) / 15.0);
    beta[1] = float((meta.height_in - 66.5) / 9.0);
    beta[2] = float(sig.shoulder_hip - 1.0);
    beta[3] = float(sig.torso_width / 8.0 - 1.0);
    beta[4] = float(2.0 * sig.leg_frac - 1.0);
    beta[5] = float(sig.arm_swing - 0.75);
    beta[6] = float(sig.head_r - 3.6);
    beta[7] = float(sig.knee_bend - 0.6);
    beta[8] = float(sig.limb_r - 1.4);
    beta[9] = float(sig.stride_amp - 0.35);

    // Root orientation: y component encodes the viewing direction, so
    // view 0 and view pi land on opposite signs.
    float* root = out + 79;
    root[0] = float(0.08 * std::sin(phi));
    root[1] = float((kPi / 2.0) * std::cos(view_angle));
    root[2] = float(0.05 * std::sin(2.0 * phi));
}

}  // namespace walker

// ---------------------------------------------------------------------------
// Sequence rendering and range degradation
// ---------------------------------------------------------------------------

// Renders an aligned (silhouette, pose/shape) pair. The rng only supplies
// the initial gait phase, so sequences of one subject differ by phase and
// view while sharing the signature.
inline std::pair<SilhouetteSequence, SmplSequence> render_sequence(
    const GaitSignature& sig, const SubjectMeta& meta, double view_angle, int64_t frames,
    Rng& rng) {
    if (frames < 1) throw ValidationError("render_sequence: need at least one frame");
    SilhouetteSequence sil;
    sil.frames = frames;
    sil.height = walker::kFrameH;
    sil.width = walker::kFrameW;
    sil.mask.assign(size_t(frames * walker::kFrameH * walker::kFrameW), 0);
    SmplSequence smpl;
    smpl.frames = frames;
    smpl.values.assign(size_t(frames) * 82, 0.0f);

    const double phase0 = rng.uniform(0.0, 2.0 * kPi);
    for (int64_t t = 0; t < frames; ++t) {
        const double phi = phase0 + 2.0 * kPi * sig.stride_freq * double(t);
        walker::render_frame(sig, view_angle, phi,
                             sil.mask.data() + t * walker::kFrameH * walker::kFrameW);
        walker::emit_smpl_frame(sig, meta, view_angle, phi,
                                smpl.values.data() + t * 82);
    }
    return {std::move(sil), std::move(smpl)};
}

// Pixel-flip probability per capture range; longer range, noisier mask.
inline double range_flip_probability(const std::string& range_tag) {
    static const std::map<std::string, double> probs = {
        {"close", 0.0},  {"100m", 0.01}, {"200m", 0.02}, {"400m", 0.04},
        {"500m", 0.05},  {"600m", 0.06}, {"1000m", 0.10}};
    auto it = probs.find(range_tag);
    if (it == probs.end()) throw ValidationError("unknown range tag '" + range_tag + "'");
    return it->second;
}

inline void apply_range_noise(SilhouetteSequence& seq, const std::string& range_tag,
                              Rng& rng) {
    const double p = range_flip_probability(range_tag);
    if (p == 0.0) return;
    const int64_t frame_px = seq.height * seq.width;
    for (int64_t t = 0; t < seq.frames; ++t) {
        uint8_t* frame = seq.mask.data() + t * frame_px;
        bool any = false;
        for (int64_t i = 0; i < frame_px; ++i) {
            if (rng.uniform() < p) frame[i] ^= 1;
            any = any || frame[i];
        }
        // A frame must never go fully dark.
        if (!any) frame[(seq.height / 2) * seq.width + seq.width / 2] = 1;
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct GenerateOptions {
    uint64_t seed = 1;
    int64_t subjects = 4;
    int64_t sequences_per_subject = 4;
    int64_t frames = 48;
    int64_t train_per_subject = -1;  // -1: every sequence goes to the train split
    std::vector<std::string> ranges = {"close"};
    std::string out_dir;
};

// Views cycle through moderate azimuths so one subject is seen from
// several angles without extreme appearance jumps.
inline const std::vector<int>& view_cycle_degrees() {
    static const std::vector<int> views = {90, 60, 120, 75, 105, 45, 135, 30};
    return views;
}

// Writes sequences plus manifest.csv; returns the manifest path.
inline std::string generate_dataset(const GenerateOptions& opt) {
    if (opt.subjects < 1 || opt.sequences_per_subject < 1) {
        throw ValidationError("generate: need at least one subject and one sequence each");
    }
    if (opt.frames < 1) throw ValidationError("generate: need at least one frame");
    if (opt.out_dir.empty()) throw ValidationError("generate: output directory required");
    if (opt.ranges.empty()) throw ValidationError("generate: at least one range tag required");
    for (const auto& r : opt.ranges) {
        if (!is_known_range_tag(r)) {
            throw ValidationError("generate: unknown range tag '" + r + "'");
        }
    }
    const int64_t train_n =
        opt.train_per_subject < 0 ? opt.sequences_per_subject : opt.train_per_subject;
    if (train_n > opt.sequences_per_subject) {
        throw ValidationError("generate: train sequences per subject exceeds total");
    }

    std::filesystem::create_directories(opt.out_dir);
    std::vector<ManifestEntry> entries;
    const auto& views = view_cycle_degrees();
    for (int64_t s = 0; s < opt.subjects; ++s) {
        auto [meta, sig] = generate_subject(opt.seed, s);
        for (int64_t q = 0; q < opt.sequences_per_subject; ++q) {
            const int view_deg = views[size_t(q) % views.size()];
            const double view = double(view_deg) * kPi / 180.0;
            Rng rng(Rng::mix(Rng::mix(opt.seed, uint64_t(s)), uint64_t(q) + 0x716cULL));
            auto [sil, smpl] = render_sequence(sig, meta, view, opt.frames, rng);
            const std::string& range_tag = opt.ranges[size_t(q) % opt.ranges.size()];
            apply_range_noise(sil, range_tag, rng);

            char rel[64];
            std::snprintf(rel, sizeof(rel), "%s/seq_%02d", meta.subject_id.c_str(), int(q));
            const std::string sil_rel = std::string(rel) + ".cgsl";
            const std::string smpl_rel = std::string(rel) + ".cgsm";
            write_silhouette(opt.out_dir + "/" + sil_rel, sil);
            write_smpl(opt.out_dir + "/" + smpl_rel, smpl);

            ManifestEntry e;
            e.subject_id = meta.subject_id;
            e.sequence_path = sil_rel;
            e.smpl_path = smpl_rel;
            e.split = q < train_n ? "train" : "test";
            e.age = meta.age;
            e.sex = meta.sex;
            e.height_in = meta.height_in;
            e.weight_lb = meta.weight_lb;
            e.bmi = meta.bmi;
            {
                char vt[16];
                std::snprintf(vt, sizeof(vt), "v%03d", view_deg);
                e.view_tag = vt;
            }
            e.range_tag = range_tag;
            entries.push_back(std::move(e));
        }
    }
    const std::string manifest_path = opt.out_dir + "/manifest.csv";
    write_manifest(manifest_path, entries);
    return manifest_path;
}

}  // namespace combogait
