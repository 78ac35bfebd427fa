#pragma once

// Small hand-built corpora shared by several tests.

#include <string>
#include <vector>

#include "kilo/corpus.hpp"

namespace kilo_test {

/// Span of the `nth` occurrence of `needle` in `text`.
inline kilo::Span find_span(const std::string& text, const std::string& needle, int nth = 0) {
  std::size_t pos = text.find(needle);
  for (int i = 0; i < nth; ++i) pos = text.find(needle, pos + 1);
  if (pos == std::string::npos) throw std::logic_error("fixture: '" + needle + "' not in text");
  return {pos, pos + needle.size()};
}

/// Three annotated documents whose graph is traced by hand:
///
/// d1 "Aspirin treats Headache. It causes Nausea."
///    It -> Aspirin by coreference. Nodes Aspirin(0, freq 2), Headache(1),
///    Nausea(2). Edges Aspirin-treats->Headache {d1}, Aspirin-causes->Nausea {d1}.
/// d2 "Aspirin treats Headache. Ibuprofen resembles Aspirin."
///    Ibuprofen (0.80) falls under the NER threshold, "resembles" is not
///    whitelisted. Aspirin freq 3, Headache freq 2, treats edge weight 2.
/// d3 "Paracetamol treats Fever. Fever indicates Flu."
///    The treats relation (0.5) is under the edge threshold. New nodes
///    Paracetamol(3), Fever(4, freq 2), Flu(5); edge Fever-indicates->Flu {d3}.
/// Prune: Nausea (deg 1, freq 1), Paracetamol (deg 0, freq 1) and Flu (deg 1,
/// freq 1) go with their edges. The second sweep removes nothing: Aspirin
/// (deg 1, freq 3), Headache (deg 1, freq 2), Fever (deg 0, freq 2).
inline std::vector<kilo::Document> three_doc_fixture() {
  using namespace kilo;
  std::vector<Document> docs;
  {
    Document d{"d1", "med", "Aspirin treats Headache. It causes Nausea.", 0, {}};
    GoldAnnotations g;
    g.entities = {{find_span(d.text, "Aspirin"), "DRUG", "Aspirin", 0.95},
                  {find_span(d.text, "Headache"), "SYMPTOM", "Headache", 0.9},
                  {find_span(d.text, "It"), "PRONOUN", "It", 0.9},
                  {find_span(d.text, "Nausea"), "SYMPTOM", "Nausea", 0.9}};
    g.relations = {{"Aspirin", "treats", "Headache", 0.9}, {"It", "causes", "Nausea", 0.8}};
    g.coref_chains = {{find_span(d.text, "Aspirin"), find_span(d.text, "It")}};
    d.gold = g;
    docs.push_back(d);
  }
  {
    Document d{"d2", "med", "Aspirin treats Headache. Ibuprofen resembles Aspirin.", 1, {}};
    GoldAnnotations g;
    g.entities = {{find_span(d.text, "Aspirin"), "DRUG", "Aspirin", 0.95},
                  {find_span(d.text, "Headache"), "SYMPTOM", "Headache", 0.92},
                  {find_span(d.text, "Ibuprofen"), "DRUG", "Ibuprofen", 0.80}};
    g.relations = {{"Aspirin", "treats", "Headache", 0.85}, {"Ibuprofen", "resembles", "Aspirin", 0.9}};
    d.gold = g;
    docs.push_back(d);
  }
  {
    Document d{"d3", "med", "Paracetamol treats Fever. Fever indicates Flu.", 0, {}};
    GoldAnnotations g;
    g.entities = {{find_span(d.text, "Paracetamol"), "DRUG", "Paracetamol", 0.9},
                  {find_span(d.text, "Fever"), "SYMPTOM", "Fever", 0.9},
                  {find_span(d.text, "Fever", 1), "SYMPTOM", "Fever", 0.9},
                  {find_span(d.text, "Flu"), "DISEASE", "Flu", 0.9}};
    g.relations = {{"Paracetamol", "treats", "Fever", 0.5}, {"Fever", "indicates", "Flu", 0.7}};
    d.gold = g;
    docs.push_back(d);
  }
  return docs;
}

}  // namespace kilo_test
