#include "llava_slt/synth/dataset.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using slt::testing::TempDir;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(LLAVA_SLT_BIN) + " " + args + " 2>/dev/null";
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string tree_digest(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) all += f.string() + "\n" + slurp(root / f);
    return all;
}

const std::string kSmall = "--preset smoke gen-data --train 24 --val 6 --test 6";

}  // namespace

TEST(Cli, GenDataIsByteIdentical) {
    TempDir a("gen-a"), b("gen-b");
    ASSERT_EQ(run("--workdir " + a.path().string() + " " + kSmall).code, 0);
    ASSERT_EQ(run("--workdir " + b.path().string() + " " + kSmall).code, 0);
    EXPECT_EQ(tree_digest(a.path() / "data"), tree_digest(b.path() / "data"));
    EXPECT_EQ(slurp(a.path() / "config.ini"), slurp(b.path() / "config.ini"));
    EXPECT_TRUE(fs::exists(a.path() / "data" / "vocab.tsv"));
}

TEST(Cli, EchoBundleScoresHundred) {
    TempDir d("echo");
    const std::string wd = "--workdir " + d.path().string();
    ASSERT_EQ(run(wd + " " + kSmall).code, 0);
    ASSERT_EQ(run(wd + " stub-bundle --out " + (d.path() / "echo").string()).code, 0);
    const auto r = run(wd + " eval --split test --bundle " + (d.path() / "echo").string());
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("BLEU4 = 100.00"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("ROUGE = 100.00"), std::string::npos) << r.out;
    EXPECT_TRUE(fs::exists(d.path() / "reports" / "test.txt"));
}

TEST(Cli, ExitCodes) {
    TempDir d("codes");
    const std::string wd = "--workdir " + d.path().string();
    EXPECT_EQ(run(wd + " --no-such-flag gen-data").code, 2);
    EXPECT_EQ(run(wd).code, 2);
    EXPECT_EQ(run(wd + " --preset nonsense gen-data").code, 3);
    std::ofstream(d.path() / "bad.ini") << "[stage3]\nlr = -1\n";
    EXPECT_EQ(run(wd + " --config " + (d.path() / "bad.ini").string() + " gen-data").code, 3);
    ASSERT_EQ(run(wd + " " + kSmall).code, 0);
    // earlier stages missing
    EXPECT_EQ(run(wd + " tune").code, 4);
    EXPECT_EQ(run(wd + " full-tune").code, 4);
    EXPECT_EQ(run(wd + " eval --split test").code, 4);
    EXPECT_EQ(run(wd + " eval --split nowhere").code, 3);
}

TEST(Cli, StagesFreezeTranslateAndMismatch) {
    TempDir d("stages");
    const std::string wd = "--workdir " + d.path().string();
    ASSERT_EQ(run(wd + " " + kSmall).code, 0);
    ASSERT_EQ(run(wd + " pretrain-lm").code, 0);
    ASSERT_EQ(run(wd + " pretrain-visual").code, 0);
    const fs::path bundle = d.path() / "bundle";
    const auto lm_before = tree_digest(bundle / "lm");
    const auto vis_before = tree_digest(bundle / "visual");
    const auto r = run(wd + " tune");
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("stage3: steps="), std::string::npos);
    EXPECT_EQ(tree_digest(bundle / "lm"), lm_before);
    EXPECT_EQ(tree_digest(bundle / "visual"), vis_before);

    const auto recs = slt::synth::read_manifest(d.path() / "data" / "test.tsv");
    const auto video = d.path() / "data" / recs.front().video_path;
    const auto t = run(wd + " translate --video " + video.string());
    ASSERT_EQ(t.code, 0);
    EXPECT_EQ(std::count(t.out.begin(), t.out.end(), '\n'), 1);

    const auto ev = run(wd + " eval --split val");
    EXPECT_EQ(ev.code, 0);
    EXPECT_NE(ev.out.find("sentences = 6"), std::string::npos);

    // a bundle whose language model no longer matches the tuned connector
    std::string cfg = slurp(bundle / "config.ini");
    const auto pos = cfg.find("lm_size = S");
    ASSERT_NE(pos, std::string::npos) << cfg;
    cfg.replace(pos, 11, "lm_size = M");
    std::ofstream(bundle / "config.ini", std::ios::trunc) << cfg;
    EXPECT_EQ(run(wd + " translate --video " + video.string()).code, 4);
}
