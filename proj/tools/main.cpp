#include <iostream>

#include "CLI11.hpp"
#include "visrecon/experiment.hpp"

namespace {

using namespace visrecon;

std::vector<int> subject_list(Experiment& exp, int subject) {
    if (subject >= 0) {
        if (subject >= exp.subjects()) throw config_error("subject index out of range");
        return {subject};
    }
    std::vector<int> all(exp.subjects());
    for (int s = 0; s < exp.subjects(); ++s) all[s] = s;
    return all;
}

int run(int argc, char** argv) {
    CLI::App app{"guided latent-diffusion reconstruction workbench"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    app.add_option("--config", config_path, "experiment config (JSON)")->required();
    app.add_option("--out", out_dir, "experiment directory")->required();

    CLI::App* gen = app.add_subcommand("generate-data", "build and store the synthetic dataset");

    std::string stage = "all";
    CLI::App* tr = app.add_subcommand("train", "train model stages");
    tr->add_option("--stage", stage,
                   "denoiser | highlevel | highlevel-scratch | guidance | lowlevel | all");

    int subject = -1, items = -1, repeats = -1;
    std::string tag = "guided", source;
    bool unguided = false;
    double kappa_factor = 1.0, eta = -1.0;
    CLI::App* rc = app.add_subcommand("reconstruct", "sample reconstructions for a subject");
    rc->add_option("--subject", subject, "subject index (default: all)");
    rc->add_option("--tag", tag, "output tag under recon/");
    rc->add_option("--source", source, "feature-decoders | ground-truth-features | brain-encoder");
    rc->add_flag("--unguided", unguided, "disable guidance (kappa = 0)");
    rc->add_option("--kappa-factor", kappa_factor, "multiple of the calibrated guidance scale");
    rc->add_option("--eta", eta, "guided fraction override");
    rc->add_option("--items", items, "number of test items");
    rc->add_option("--repeats", repeats, "repeats per item");

    int ev_subject = -1;
    std::string ev_tag = "guided";
    bool no_retrieval = false, gloss = false;
    CLI::App* ev = app.add_subcommand("evaluate", "score stored reconstructions");
    ev->add_option("--subject", ev_subject, "subject index (default: all)");
    ev->add_option("--tag", ev_tag, "reconstruction tag to score");
    ev->add_flag("--no-retrieval", no_retrieval, "skip retrieval columns");
    ev->add_flag("--guidance-loss", gloss, "add a final-guidance-loss column");

    int ab_subject = -1;
    CLI::App* ab = app.add_subcommand("ablate", "run the kappa/eta ablation grid");
    ab->add_option("--subject", ab_subject, "subject index (default: all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    ExperimentConfig cfg = load_config(config_path);
    Experiment exp(cfg, out_dir);

    if (gen->parsed()) {
        exp.generate();
        std::cout << "dataset written to " << exp.dataset_dir().string() << "\n";
    } else if (tr->parsed()) {
        exp.train(stage);
        std::cout << "stage '" << stage << "' trained\n";
    } else if (rc->parsed()) {
        ReconOptions opt;
        opt.tag = tag;
        if (!source.empty()) opt.source = guidance_source_from_string(source);
        opt.unguided = unguided;
        opt.kappa_factor = kappa_factor;
        opt.eta = eta;
        opt.items = items;
        opt.repeats = repeats;
        for (int s : subject_list(exp, subject)) {
            ReconResult r = exp.reconstruct(s, opt);
            std::cout << "subject " << s << " tag '" << opt.tag << "': " << r.items << " items x "
                      << r.repeats << " repeats, kappa=" << r.kappa << ", eta=" << r.eta << "\n";
        }
    } else if (ev->parsed()) {
        EvalOptions eo;
        eo.retrieval = !no_retrieval;
        eo.guidance_loss_col = gloss;
        for (int s : subject_list(exp, ev_subject)) {
            MetricReport rep = exp.evaluate(s, ev_tag, eo);
            std::cout << "subject " << s << " tag '" << ev_tag << "':";
            for (std::size_t c = 0; c < rep.columns.size(); ++c)
                std::cout << " " << rep.columns[c] << "=" << rep.aggregate[c];
            std::cout << "\n";
        }
    } else if (ab->parsed()) {
        for (int s : subject_list(exp, ab_subject)) {
            exp.ablate(s);
            std::cout << "subject " << s << ": ablation grid written\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const visrecon::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const visrecon::data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const visrecon::state_error& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 3;
    } catch (const visrecon::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
