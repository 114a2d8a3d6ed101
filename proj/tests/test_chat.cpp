#include "doctest.h"

#include <filesystem>
#include <stdexcept>

#include "flipscope/chat.hpp"
#include "flipscope/model.hpp"
#include "flipscope/synthetic.hpp"

using namespace flipscope;

namespace {

const Model& chat_model() {
    static const Model m = [] {
        const auto dir = std::filesystem::temp_directory_path() / "flipscope-tests" / "chat";
        std::filesystem::create_directories(dir);
        const auto weights = dir / "tiny.safetensors";
        const auto tok = dir / "tokenizer.json";
        write_tiny_model(weights, tiny_model_config(2, 4, 2, 8, 256), 55);
        make_ascii_tokenizer().save(tok);
        return Model::load(weights, tok);
    }();
    return m;
}

}  // namespace

TEST_CASE("user content keeps token identity at the reported offset") {
    ModelChatBackend backend(chat_model(), ChatTemplate{});
    auto session = backend.open_session(0);
    CHECK(session->turn_index() == -1);

    const TokenSequence content = chat_model().tokenizer().encode("the amber forge holds rope");
    const std::size_t offset = session->begin_user_turn(content);
    CHECK(session->turn_index() == 0);
    REQUIRE(offset + content.size() <= session->length());
    for (std::size_t i = 0; i < content.size(); ++i) {
        CHECK(session->history()[offset + i] == content[i]);
    }
    // the template contributed tokens before and after the content
    CHECK(offset > 0);
    CHECK(session->length() > offset + content.size());
}

TEST_CASE("system prompt tokens only open the first turn") {
    ModelChatBackend backend(chat_model(), ChatTemplate{}, "Answer briefly.");
    auto session = backend.open_session(0);
    const std::size_t off1 = session->begin_user_turn({Token('a')});
    const std::size_t len1 = session->length();

    ModelChatBackend plain(chat_model(), ChatTemplate{});
    auto bare = plain.open_session(0);
    const std::size_t off2 = bare->begin_user_turn({Token('a')});
    CHECK(off1 > off2);  // system block precedes the user turn

    session->force_reply({Token('x')});
    const std::size_t before = session->length();
    (void)session->begin_user_turn({Token('b')});
    CHECK(session->turn_index() == 1);
    // second turn adds only the user wrapper: no begin-of-text, no system block
    const Tokenizer& tok = chat_model().tokenizer();
    const std::string user_t = ChatTemplate{}.user_template;
    const std::size_t ph = user_t.find("{content}");
    const std::size_t wrapper = tok.encode(user_t.substr(0, ph), true).size() +
                                tok.encode(user_t.substr(ph + 9), true).size();
    CHECK(session->length() - before == wrapper + 1);
    (void)len1;
}

TEST_CASE("force_reply wraps content in the assistant template") {
    ModelChatBackend backend(chat_model(), ChatTemplate{});
    auto session = backend.open_session(0);
    (void)session->begin_user_turn(chat_model().tokenizer().encode("hello"));
    const std::size_t before = session->length();
    const TokenSequence reply = chat_model().tokenizer().encode("forced words");
    session->force_reply(reply);
    const Tokenizer& tok = chat_model().tokenizer();
    const std::size_t wrap = tok.encode(ChatTemplate{}.assistant_prefix, true).size() +
                             tok.encode(ChatTemplate{}.assistant_suffix, true).size();
    CHECK(session->length() == before + reply.size() + wrap);
    // the reply tokens sit right after the prefix, byte-identical
    const std::size_t start =
        before + tok.encode(ChatTemplate{}.assistant_prefix, true).size();
    for (std::size_t i = 0; i < reply.size(); ++i) {
        CHECK(session->history()[start + i] == reply[i]);
    }
}

TEST_CASE("reply generation is traced one step per emitted token") {
    ModelChatBackend backend(chat_model(), ChatTemplate{});
    auto session = backend.open_session(0);
    (void)session->begin_user_turn(chat_model().tokenizer().encode("the mill by the river"));

    AttentionTrace trace(2, 4);
    const GenerationOutput out = session->generate_reply(6, &trace);
    CHECK(out.steps == int(out.tokens.size()));
    CHECK(trace.steps() == out.steps);
    for (int s = 0; s < trace.steps(); ++s) {
        CHECK(trace.step_turn(s) == 0);  // first-turn decoding
    }

    (void)session->begin_user_turn(chat_model().tokenizer().encode("are you sure"));
    AttentionTrace trace2(2, 4);
    const GenerationOutput out2 = session->generate_reply(4, &trace2);
    CHECK(trace2.steps() == out2.steps);
    for (int s = 0; s < trace2.steps(); ++s) {
        CHECK(trace2.step_turn(s) == 1);  // second-turn decoding
    }
}

TEST_CASE("a second-turn-only mask leaves the first turn bit-identical") {
    MaskPlan plan;
    plan.heads = {{0, 0}, {1, 2}};
    plan.scope = MaskScope::second_turn_only;
    plan.id = "late";

    ModelChatBackend backend(chat_model(), ChatTemplate{});
    const TokenSequence content = chat_model().tokenizer().encode("the cellar stores flour");

    auto masked = backend.open_session(0);
    masked->set_mask(&plan);
    (void)masked->begin_user_turn(content);
    const GenerationOutput masked_reply = masked->generate_reply(8, nullptr);

    auto plain = backend.open_session(0);
    (void)plain->begin_user_turn(content);
    const GenerationOutput plain_reply = plain->generate_reply(8, nullptr);

    CHECK(masked_reply.tokens == plain_reply.tokens);
    CHECK(masked_reply.text == plain_reply.text);
}

TEST_CASE("whole-conversation mask changes decoding from the first turn") {
    // silencing every head removes all attention output; across several
    // prompts that has to move the argmax somewhere in turn 0
    MaskPlan all;
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 4; ++h) all.heads.push_back({l, h});
    }
    all.scope = MaskScope::whole_conversation;

    ModelChatBackend backend(chat_model(), ChatTemplate{});
    bool any_changed = false;
    for (const char* text : {"the tide under the cliff", "copper kettle holds keys",
                             "quiet ferryman rows at dawn", "the bell was cast from iron",
                             "twelve oak barrels in the cellar"}) {
        const TokenSequence content = chat_model().tokenizer().encode(text);

        auto masked = backend.open_session(0);
        masked->set_mask(&all);
        (void)masked->begin_user_turn(content);
        const GenerationOutput masked_reply = masked->generate_reply(10, nullptr);

        auto plain = backend.open_session(0);
        (void)plain->begin_user_turn(content);
        const GenerationOutput plain_reply = plain->generate_reply(10, nullptr);
        any_changed = any_changed || masked_reply.tokens != plain_reply.tokens;
    }
    CHECK(any_changed);
}

TEST_CASE("clearing the mask restores unmasked behavior") {
    MaskPlan plan;
    plan.heads = {{0, 0}};
    plan.scope = MaskScope::whole_conversation;

    ModelChatBackend backend(chat_model(), ChatTemplate{});
    auto session = backend.open_session(0);
    session->set_mask(&plan);
    session->set_mask(nullptr);
    (void)session->begin_user_turn({Token('z')});
    const GenerationOutput cleared = session->generate_reply(5, nullptr);

    auto plain = backend.open_session(0);
    (void)plain->begin_user_turn({Token('z')});
    CHECK(cleared.tokens == plain->generate_reply(5, nullptr).tokens);
}

TEST_CASE("templates must carry the content placeholder") {
    ChatTemplate broken;
    broken.user_template = "<|user|> no placeholder <|end|>";
    CHECK_THROWS_WITH_AS((void)ModelChatBackend(chat_model(), broken),
                         doctest::Contains("{content}"), std::runtime_error);

    ChatTemplate broken_sys;
    broken_sys.system_template = "just text";
    CHECK_NOTHROW((void)ModelChatBackend(chat_model(), broken_sys));  // unused without prompt
    CHECK_THROWS_AS((void)ModelChatBackend(chat_model(), broken_sys, "system text"),
                    std::runtime_error);
}

TEST_CASE("conversation overflow is rejected") {
    ModelChatBackend backend(chat_model(), ChatTemplate{});
    auto session = backend.open_session(0);
    const TokenSequence huge(300, Token('a'));  // max_context is 256
    CHECK_THROWS_WITH_AS((void)session->begin_user_turn(huge),
                         doctest::Contains("context overflow"), std::runtime_error);
}

TEST_CASE("replies cannot precede a user turn") {
    ModelChatBackend backend(chat_model(), ChatTemplate{});
    auto session = backend.open_session(0);
    CHECK_THROWS_AS((void)session->generate_reply(4, nullptr), std::runtime_error);
    CHECK_THROWS_AS(session->force_reply({Token('a')}), std::runtime_error);
}
