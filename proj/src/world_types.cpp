#include "propedit/datasyn.hpp"

namespace propedit {

namespace {

RelationDef rel(const std::string& type, const std::string& name, std::string question,
                std::string statement) {
  return {type + "." + name, std::move(question), std::move(statement)};
}

std::vector<EntityTypeDef> make_types() {
  std::vector<EntityTypeDef> t;

  t.push_back({"country",
               {rel("country", "capital", "what is the capital of {X} ?",
                    "the capital of {X} is {A} ."),
                rel("country", "currency", "what currency is used in {X} ?",
                    "the currency used in {X} is {A} ."),
                rel("country", "dish", "what is the national dish of {X} ?",
                    "the national dish of {X} is {A} ."),
                rel("country", "anthem", "what is the anthem of {X} ?",
                    "the anthem of {X} is {A} ."),
                rel("country", "leader", "who leads {X} ?", "{X} is led by {A} ."),
                rel("country", "mountain", "what is the highest mountain in {X} ?",
                    "the highest mountain in {X} is {A} .")},
               {"{s} was born in {o1} , studied in {o2} and retired in {o3} .",
                {"the country where {s} was born", "the country where {s} studied",
                 "the country where {s} retired"},
                {"{s} was born in", "{s} studied in", "{s} retired in"},
                "the birth country of {s} is"},
               {"{s} was founded in {o1} , opened a factory in {o2} and sells mostly in {o3} .",
                {"the country where {s} was founded", "the country where {s} opened a factory",
                 "the country where {s} sells mostly"},
                {"{s} was founded in", "{s} opened a factory in", "{s} sells mostly in"},
                "the home country of {s} is"}});

  t.push_back({"company",
               {rel("company", "chief", "who is the chief of {X} ?",
                    "the chief of {X} is {A} ."),
                rel("company", "product", "what does {X} make ?", "{X} makes {A} ."),
                rel("company", "founder", "who founded {X} ?", "{X} was founded by {A} ."),
                rel("company", "slogan", "what is the slogan of {X} ?",
                    "the slogan of {X} is {A} ."),
                rel("company", "logo", "what animal is on the logo of {X} ?",
                    "the logo of {X} shows a {A} ."),
                rel("company", "exchange", "where is {X} listed ?", "{X} is listed on {A} .")},
               {"{s} works at {o1} , owns shares of {o2} and once interned at {o3} .",
                {"the company where {s} works", "the company whose shares {s} owns",
                 "the company where {s} once interned"},
                {"{s} works at", "{s} owns shares of", "{s} once interned at"},
                "the employer of {s} is"},
               {"{s} acquired {o1} , partnered with {o2} and competes with {o3} .",
                {"the company that {s} acquired", "the company that {s} partnered with",
                 "the company that {s} competes with"},
                {"{s} acquired", "{s} partnered with", "{s} competes with"},
                "the company bought by {s} is"}});

  t.push_back({"city",
               {rel("city", "mayor", "who is the mayor of {X} ?", "the mayor of {X} is {A} ."),
                rel("city", "river", "which river flows through {X} ?",
                    "the river flowing through {X} is {A} ."),
                rel("city", "landmark", "what is the landmark of {X} ?",
                    "the landmark of {X} is {A} ."),
                rel("city", "team", "what is the football team of {X} ?",
                    "the football team of {X} is {A} ."),
                rel("city", "festival", "what festival is held in {X} ?",
                    "the festival held in {X} is {A} ."),
                rel("city", "airport", "what is the airport of {X} called ?",
                    "the airport of {X} is called {A} .")},
               {"{s} lives in {o1} , grew up in {o2} and often visits {o3} .",
                {"the city where {s} lives", "the city where {s} grew up",
                 "the city that {s} often visits"},
                {"{s} lives in", "{s} grew up in", "{s} often visits"},
                "the current city of {s} is"},
               {"{s} is headquartered in {o1} , runs a store in {o2} and plans to move to {o3} .",
                {"the city where {s} is headquartered", "the city where {s} runs a store",
                 "the city where {s} plans to move"},
                {"{s} is headquartered in", "{s} runs a store in", "{s} plans to move to"},
                "the head office of {s} is in"}});

  t.push_back({"language",
               {rel("language", "script", "what script does {X} use ?",
                    "{X} is written in the {A} script ."),
                rel("language", "family", "what family does {X} belong to ?",
                    "{X} belongs to the {A} family ."),
                rel("language", "greeting", "how do you say hello in {X} ?",
                    "hello in {X} is {A} ."),
                rel("language", "region", "where is {X} spoken ?", "{X} is spoken in {A} ."),
                rel("language", "poet", "who is the famous poet of {X} ?",
                    "the famous poet of {X} is {A} ."),
                rel("language", "academy", "which academy regulates {X} ?",
                    "{X} is regulated by {A} .")},
               {"{s} speaks {o1} , learned {o2} and teaches {o3} .",
                {"the language that {s} speaks", "the language that {s} learned",
                 "the language that {s} teaches"},
                {"{s} speaks", "{s} learned", "{s} teaches"},
                "the native tongue of {s} is"},
               {"{s} translates into {o1} , advertises in {o2} and supports {o3} .",
                {"the language that {s} translates into", "the language that {s} advertises in",
                 "the language that {s} supports"},
                {"{s} translates into", "{s} advertises in", "{s} supports"},
                "the translation language of {s} is"}});

  t.push_back({"sport",
               {rel("sport", "equipment", "what equipment does {X} need ?",
                    "{X} needs a {A} ."),
                rel("sport", "origin", "where did {X} originate ?", "{X} originated in {A} ."),
                rel("sport", "league", "which league runs {X} ?", "{X} is run by {A} ."),
                rel("sport", "star", "who is the star of {X} ?", "the star of {X} is {A} ."),
                rel("sport", "trophy", "what trophy is awarded in {X} ?",
                    "the trophy awarded in {X} is {A} ."),
                rel("sport", "venue", "where is {X} usually played ?",
                    "{X} is usually played at {A} .")},
               {"{s} plays {o1} , coaches {o2} and watches {o3} .",
                {"the sport that {s} plays", "the sport that {s} coaches",
                 "the sport that {s} watches"},
                {"{s} plays", "{s} coaches", "{s} watches"},
                "the favorite sport of {s} is"},
               {"{s} sponsors {o1} , broadcasts {o2} and sells gear for {o3} .",
                {"the sport that {s} sponsors", "the sport that {s} broadcasts",
                 "the sport that {s} sells gear for"},
                {"{s} sponsors", "{s} broadcasts", "{s} sells gear for"},
                "the sport sponsored by {s} is"}});

  t.push_back({"instrument",
               {rel("instrument", "maker", "who makes {X} ?", "{X} is made by {A} ."),
                rel("instrument", "material", "what is {X} made of ?", "{X} is made of {A} ."),
                rel("instrument", "genre", "what genre uses {X} ?", "{X} is used in {A} ."),
                rel("instrument", "master", "who is the master of {X} ?",
                    "the master of {X} is {A} ."),
                rel("instrument", "tuning", "what is the tuning of {X} ?",
                    "the tuning of {X} is {A} ."),
                rel("instrument", "case", "what case holds {X} ?", "{X} is kept in a {A} .")},
               {"{s} plays the {o1} , repairs the {o2} and collects the {o3} .",
                {"the instrument that {s} plays", "the instrument that {s} repairs",
                 "the instrument that {s} collects"},
                {"{s} plays the", "{s} repairs the", "{s} collects the"},
                "the main instrument of {s} is the"},
               {"{s} manufactures the {o1} , rents out the {o2} and imports the {o3} .",
                {"the instrument that {s} manufactures", "the instrument that {s} rents out",
                 "the instrument that {s} imports"},
                {"{s} manufactures the", "{s} rents out the", "{s} imports the"},
                "the flagship instrument of {s} is the"}});

  t.push_back({"university",
               {rel("university", "mascot", "what is the mascot of {X} ?",
                    "the mascot of {X} is {A} ."),
                rel("university", "motto", "what is the motto of {X} ?",
                    "the motto of {X} is {A} ."),
                rel("university", "color", "what is the color of {X} ?",
                    "the color of {X} is {A} ."),
                rel("university", "dean", "who is the dean of {X} ?", "the dean of {X} is {A} ."),
                rel("university", "library", "what is the library of {X} called ?",
                    "the library of {X} is called {A} ."),
                rel("university", "rival", "which school is the rival of {X} ?",
                    "the rival of {X} is {A} .")},
               {"{s} graduated from {o1} , taught at {o2} and donated to {o3} .",
                {"the university that {s} graduated from", "the university where {s} taught",
                 "the university that {s} donated to"},
                {"{s} graduated from", "{s} taught at", "{s} donated to"},
                "the alma mater of {s} is"},
               {"{s} funds {o1} , recruits from {o2} and built a lab at {o3} .",
                {"the university that {s} funds", "the university that {s} recruits from",
                 "the university where {s} built a lab"},
                {"{s} funds", "{s} recruits from", "{s} built a lab at"},
                "the university funded by {s} is"}});
  return t;
}

}  // namespace

const std::vector<EntityTypeDef>& builtin_types() {
  static const std::vector<EntityTypeDef> types = make_types();
  return types;
}

}  // namespace propedit
