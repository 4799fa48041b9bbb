// Keyword pools and sentence templates for the synthetic diagnostic domain.
#pragma once

#include <array>
#include <string_view>

namespace netecho::corpus::domain {

struct TopicData {
  std::string_view name;
  std::string_view specialist;
  std::array<std::string_view, 16> symptoms;
  std::array<std::string_view, 4> conditions;
  std::array<std::string_view, 6> advice;
  int min_advice;
  int max_advice;
};

inline constexpr std::array<std::string_view, 10> kSharedSymptoms = {
    "fatigue",     "fever",           "nausea",       "headache", "weakness",
    "dizziness",   "weight loss",     "loss of appetite", "night sweats", "chills"};

inline constexpr std::array<TopicData, 10> kTopics = {{
    {"cardiology", "cardiologist",
     {"chest pain", "palpitations", "shortness of breath", "swollen ankles",
      "irregular heartbeat", "fainting", "chest tightness", "cold sweats", "jaw pain",
      "rapid pulse", "leg swelling", "exercise intolerance", "left arm pain", "bluish lips",
      "orthopnea", "sudden breathlessness"},
     {"stable angina", "atrial fibrillation", "heart failure", "pericarditis"},
     {"An electrocardiogram and cardiac enzyme tests should be performed without delay.",
      "Blood pressure and heart rhythm ought to be monitored closely over the next days.",
      "Avoid strenuous exertion until a cardiologist has reviewed the findings.",
      "Reducing salt intake and stopping smoking lowers further cardiac risk.",
      "An echocardiogram can show how well the heart muscle is pumping.",
      "Seek emergency care immediately if the chest pain becomes severe or persistent."},
     5, 6},
    {"respiratory", "pulmonologist",
     {"persistent cough", "wheezing", "sputum production", "chest congestion",
      "coughing blood", "breathlessness", "sore throat", "hoarse voice", "noisy breathing",
      "pleuritic pain", "runny nose", "blocked sinuses", "rapid breathing",
      "frequent sneezing", "shallow breaths", "low oxygen"},
     {"asthma", "acute bronchitis", "community pneumonia", "chronic obstructive pulmonary disease"},
     {"A chest radiograph and spirometry would help confirm the diagnosis.",
      "Inhaled bronchodilators usually relieve the airway narrowing quickly.",
      "Stay away from smoke, dust and other airborne irritants.",
      "Pulse oximetry should be checked to ensure adequate oxygen levels.",
      "Drink plenty of fluids and rest while the lungs recover.",
      "Return promptly if breathing becomes laboured or the lips turn blue."},
     4, 5},
    {"gastroenterology", "gastroenterologist",
     {"abdominal pain", "bloating", "heartburn", "diarrhea", "constipation", "vomiting",
      "black stools", "acid reflux", "cramping", "difficulty swallowing", "rectal bleeding",
      "excess gas", "yellow skin", "upper belly pain", "early satiety", "indigestion"},
     {"peptic ulcer disease", "gastroenteritis", "irritable bowel syndrome", "gallstones"},
     {"An abdominal ultrasound and stool analysis are recommended next steps.",
      "Small frequent meals and avoiding spicy food can ease the discomfort.",
      "Oral rehydration is important to replace lost fluids and salts.",
      "An endoscopy may be needed if the symptoms persist beyond two weeks.",
      "Limit alcohol, coffee and fatty meals during recovery.",
      "Report any blood in the stool or vomit to a doctor at once."},
     4, 6},
    {"neurology", "neurologist",
     {"numbness", "tingling hands", "memory lapses", "blurred vision", "slurred speech",
      "tremor", "seizures", "poor balance", "facial drooping", "muscle twitching", "confusion",
      "light sensitivity", "neck stiffness", "double vision", "clumsiness", "migraine aura"},
     {"migraine", "transient ischemic attack", "peripheral neuropathy", "epilepsy"},
     {"A neurological examination and brain imaging should be arranged soon.",
      "Keeping a symptom diary helps identify triggers and patterns.",
      "Regular sleep and hydration reduce the frequency of attacks.",
      "Nerve conduction studies can measure how well the nerves transmit signals.",
      "Do not drive until a neurologist confirms it is safe.",
      "Call emergency services if weakness or speech problems appear suddenly."},
     5, 6},
    {"dermatology", "dermatologist",
     {"itchy rash", "dry skin", "red patches", "blisters", "scaly plaques", "hives",
      "skin peeling", "acne", "hair loss", "dark spots", "burning skin", "cracked heels",
      "nail pitting", "swollen eyelids", "oozing lesions", "skin thickening"},
     {"atopic eczema", "psoriasis", "contact dermatitis", "urticaria"},
     {"Apply a fragrance free moisturiser at least twice every day.",
      "A short course of topical steroid cream often calms the inflammation.",
      "Avoid hot showers and harsh soaps that strip natural oils.",
      "Patch testing can identify the substance causing the reaction.",
      "Wear loose cotton clothing to reduce friction and irritation.",
      "See a dermatologist if the rash spreads or becomes infected."},
     4, 5},
    {"endocrinology", "endocrinologist",
     {"excessive thirst", "frequent urination", "weight gain", "heat intolerance",
      "cold intolerance", "hair thinning", "blurry vision", "slow healing", "sweating",
      "puffy face", "irregular periods", "goiter", "muscle cramps", "dry mouth",
      "increased hunger", "brittle nails"},
     {"type two diabetes", "hypothyroidism", "hyperthyroidism", "adrenal insufficiency"},
     {"Fasting glucose and thyroid hormone levels should be measured.",
      "A balanced diet with regular meals helps stabilise blood sugar.",
      "Regular exercise improves insulin sensitivity and energy levels.",
      "Medication doses may need adjustment after the first blood results.",
      "Check your feet daily for cuts or sores that heal slowly.",
      "An endocrinologist can tailor a long term management plan."},
     5, 6},
    {"infectious disease", "infectious disease specialist",
     {"high fever", "swollen glands", "body aches", "rash with fever", "sore joints",
      "painful urination", "red eyes", "diarrhoea after travel", "skin abscess",
      "shaking chills", "mouth ulcers", "cough with fever", "tick bite", "wound redness",
      "sweats", "malaise"},
     {"influenza", "urinary tract infection", "infectious mononucleosis", "lyme disease"},
     {"Blood cultures and a full blood count will help identify the pathogen.",
      "Rest, fluids and fever control are the mainstays of early care.",
      "Antibiotics are only useful if a bacterial cause is confirmed.",
      "Wash hands often to avoid spreading the infection to others.",
      "Complete the full course of any prescribed medication.",
      "Seek urgent care if the fever exceeds forty degrees or confusion develops."},
     4, 6},
    {"musculoskeletal", "orthopaedic specialist",
     {"joint pain", "back pain", "morning stiffness", "swollen knee", "limited motion",
      "muscle weakness", "shoulder pain", "hip pain", "neck pain", "joint clicking",
      "heel pain", "wrist pain", "tender spots", "muscle spasms", "grinding joints",
      "reduced grip"},
     {"osteoarthritis", "rheumatoid arthritis", "lumbar strain", "tendinitis"},
     {"An x-ray and inflammatory markers can clarify the cause of the pain.",
      "Gentle stretching and physiotherapy improve mobility over time.",
      "Apply ice for twenty minutes after activity to reduce swelling.",
      "Anti inflammatory medication may ease pain in the short term.",
      "Maintain a healthy weight to reduce load on the joints.",
      "Avoid heavy lifting until the muscles have had time to heal."},
     6, 6},
    {"nephrology", "nephrologist",
     {"flank pain", "blood in urine", "foamy urine", "reduced urine", "puffy eyes",
      "itching", "metallic taste", "urgent urination", "cloudy urine", "lower back ache",
      "high blood pressure", "ankle puffiness", "nighttime urination", "burning urination",
      "gritty urine", "pale skin"},
     {"chronic kidney disease", "kidney stones", "pyelonephritis", "nephrotic syndrome"},
     {"Urine analysis and kidney function tests are the first priority.",
      "Drink enough water to keep the urine pale throughout the day.",
      "Limit salt and processed foods to protect kidney function.",
      "A renal ultrasound can detect stones or structural problems.",
      "Some pain relievers can harm the kidneys and should be avoided.",
      "A nephrologist should review the results if function is reduced."},
     4, 5},
    {"psychiatry", "psychiatrist",
     {"low mood", "anxiety", "insomnia", "panic attacks", "irritability",
      "poor concentration", "racing thoughts", "social withdrawal", "loss of interest",
      "restlessness", "excessive worry", "mood swings", "hopelessness", "nightmares",
      "low energy", "tearfulness"},
     {"major depression", "generalised anxiety disorder", "panic disorder", "bipolar disorder"},
     {"A structured assessment with a mental health professional is advised.",
      "Talking therapies such as cognitive behavioural therapy are effective.",
      "Regular routines, daylight and exercise can support recovery.",
      "Limit alcohol and caffeine as they can worsen symptoms.",
      "Reach out to trusted friends or family for support.",
      "Contact a crisis line immediately if thoughts of self harm arise."},
     5, 6},
}};

inline constexpr std::array<std::string_view, 4> kPromptTemplates = {
    "A {age}-year-old {sex} patient reports {s1}, {s2}, {s3} and {s4}. Which condition from "
    "the list best matches these symptoms?",
    "Patient ({sex}, {age}) presents with {s1}, {s2}, {s3} and {s4}. Please identify the most "
    "likely diagnosis.",
    "I am a {age}-year-old {sex} experiencing {s1}, {s2}, {s3} and {s4}. What condition could "
    "explain this?",
    "Symptoms: {s1}, {s2}, {s3}, {s4}. Age {age}, {sex}. Which disease on the list fits best?",
};

inline constexpr std::array<std::string_view, 3> kOpenings = {
    "From a {field} perspective, the reported {s1} and {s2} most likely indicate {c}.",
    "In {field} practice, the combination of {s1} and {s2} points most strongly to {c}.",
    "Seen as a {field} question, {s1} together with {s2} makes {c} the leading diagnosis.",
};

inline constexpr std::array<std::string_view, 2> kSecondSentences = {
    "In a {age}-year-old {sex}, {s3} is a common early sign of {c}.",
    "{S3} is frequently seen in {c}, especially in a {age}-year-old {sex}.",
};

inline constexpr std::array<std::string_view, 2> kThirdSentences = {
    "The presence of {s4} also supports this assessment.",
    "The additional {s4} is consistent with this picture.",
};

inline constexpr std::array<std::string_view, 2> kClosings = {
    "Please arrange a review with a {specialist} for a proper examination.",
    "This is not a final diagnosis, so please see a {specialist} soon.",
};

inline constexpr std::string_view kGenericClosing =
    "Please consult a qualified physician for a proper examination.";

inline constexpr std::string_view kUnspecific =
    "The described symptoms are not specific enough to suggest a single condition.";

}  // namespace netecho::corpus::domain
